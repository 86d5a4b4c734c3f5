"""Command-line pipeline: generate, train, sample, evaluate, reproduce.

Subcommands mirror the pipeline phases; every run is deterministic given
its flags and seed (FYM_SEED serves as the seed fallback). Report paths
write delimited CSV plus a rendered PNG figure next to each report.

Exit codes: 0 success, 1 validation (bad flags, malformed inputs, failed
checks), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys


def _default_seed() -> int:
    return int(os.environ.get("FYM_SEED", "0"))


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract reserves 2 for
    # runtime failures, so remap
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trajflow",
                description="Trajectory-conditioned flow matching pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (set before numpy loads)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[], help="generate a synthetic bundle")
    g.add_argument("--out", required=True, help="bundle directory to write")
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--size", type=int, default=32, help="frame side length")
    g.add_argument("--motion", default="translate",
                   choices=["translate", "orbit", "oscillate"])
    g.add_argument("--params", default="2,0",
                   help="motion parameters, comma separated")
    g.add_argument("--jitter", type=float, default=0.0,
                   help="per-frame center jitter in px")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--edit", choices=["recolor", "accessory"], default=None,
                   help="also apply an appearance edit (role becomes edited)")
    g.add_argument("--gamma", type=float, default=2.0, help="recolor exponent")

    t = sub.add_parser("train", help="train (or fine-tune) on a bundle")
    t.add_argument("--data", required=True, help="bundle directory")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--token-grid", type=int, default=8)
    t.add_argument("--width", type=int, default=128)
    t.add_argument("--levels", type=int, default=16)
    t.add_argument("--table-size", type=int, default=2 ** 14)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--from", dest="from_ckpt", default=None,
                   help="phase-1 checkpoint; switches to the fine-tune phase")
    t.add_argument("--dram", action="store_true",
                   help="enable landmark-driven re-weighting")
    t.add_argument("--dram-interval", type=int, default=100)
    t.add_argument("--ref-bundle", default=None,
                   help="bundle supplying reference landmarks for --dram")
    t.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("sample", help="sample one frame from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True,
                   help="bundle supplying conditioning (first frame, masks)")
    s.add_argument("--frame", type=int, required=True, help="1-based frame")
    s.add_argument("--steps", type=int, default=50, help="Euler steps")
    s.add_argument("--out", required=True, help="output PGM path")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--no-weights", action="store_true",
                   help="ignore re-weighting state stored in the checkpoint")

    e = sub.add_parser("eval", help="consistency or expression report")
    e.add_argument("--mode", required=True, choices=["consistency", "expression"])
    e.add_argument("--ref", required=True, help="reference bundle directory")
    e.add_argument("--pred", required=True, help="compared bundle directory")
    e.add_argument("--out", required=True, help="CSV report path")
    e.add_argument("--no-figures", action="store_true")

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--tolerance", type=float, default=1e-3)

    r = sub.add_parser("repro", help="end-to-end pipeline into one directory")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--frames", type=int, default=16)
    r.add_argument("--size", type=int, default=32)
    r.add_argument("--steps", type=int, default=4000)
    r.add_argument("--finetune-steps", type=int, default=400)
    r.add_argument("--lr", type=float, default=2e-3)
    r.add_argument("--sample-steps", type=int, default=50)
    r.add_argument("--dram", action="store_true")
    r.add_argument("--no-figures", action="store_true")
    return p


def _parse_params(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"--params must be comma-separated numbers, got {text!r}")


def cmd_gen_synth(args) -> int:
    from . import dataio, synthdata

    seed = args.seed if args.seed is not None else _default_seed()
    spec = synthdata.MotionSpec(args.motion, _parse_params(args.params),
                                seed=seed, jitter=args.jitter)
    bundle = synthdata.generate(spec, args.frames, args.size, args.size)
    if args.edit:
        bundle = synthdata.apply_edit(bundle, args.edit, gamma=args.gamma)
    path = dataio.write_bundle(args.out, bundle)
    print(f"wrote {bundle.role} bundle ({bundle.frame_count} frames of "
          f"{bundle.height}x{bundle.width}) at {path}")
    return 0


def _train_setup(args, bundle):
    import numpy as np

    from . import dataio, flowmatch, hashgrid

    seed = args.seed if args.seed is not None else _default_seed()
    if args.from_ckpt:
        ck = dataio.read_checkpoint(args.from_ckpt)
        model, table = ck.model, ck.table
        phase = "finetune"
    else:
        ss = np.random.SeedSequence([seed, 0x1137])
        init_rng = np.random.default_rng(ss)
        grid_cfg = hashgrid.HashGridConfig(levels=args.levels,
                                           table_size=args.table_size)
        table = hashgrid.FeatureTable.create(grid_cfg, init_rng)
        model = flowmatch.VelocityModel.create(
            flowmatch.ModelConfig(feature_dim=grid_cfg.feature_dim,
                                  width=args.width), init_rng)
        phase = "train"
    cfg = flowmatch.TrainConfig(steps=args.steps, batch_size=args.batch,
                                learning_rate=args.lr,
                                token_grid=args.token_grid, seed=seed,
                                phase=phase, dram=args.dram,
                                dram_interval=args.dram_interval)
    return model, table, cfg


def cmd_train(args) -> int:
    from . import dataio, flowmatch

    bundle = dataio.read_bundle(args.data)
    model, table, cfg = _train_setup(args, bundle)
    reference = None
    if args.ref_bundle:
        reference = dataio.read_bundle(args.ref_bundle).landmarks
    result = flowmatch.train(model, table, bundle, cfg,
                             reference_landmarks=reference)
    extras = {"weight_matrix": result.weight_matrix,
              "token_weights": result.token_weights}
    dataio.write_checkpoint(args.out, model, table, cfg, extras=extras)
    loss_csv = str(args.out) + ".loss.csv"
    dataio.write_loss_curve(loss_csv, result.losses)
    if not args.no_figures:
        from . import plots
        plots.save_loss_curve(result.losses, str(args.out) + ".loss.png")
    if result.losses.size:
        sm = flowmatch.smoothed(result.losses)
        print(f"trained {cfg.steps} steps ({cfg.phase}); smoothed loss "
              f"{sm[0]:.4f} -> {sm[-1]:.4f}")
    else:
        print("trained 0 steps; checkpoint equals initialization")
    print(f"checkpoint: {args.out}\nloss curve: {loss_csv}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from . import dataio, flowmatch

    ck = dataio.read_checkpoint(args.ckpt)
    bundle = dataio.read_bundle(args.data)
    if not 1 <= args.frame <= bundle.frame_count:
        raise ValueError(f"--frame {args.frame} outside 1..{bundle.frame_count}")
    seed = args.seed if args.seed is not None else _default_seed()
    grid = ck.train_config.token_grid if ck.train_config else 8
    t_min = ck.train_config.t_min if ck.train_config else 1e-3
    weights = None
    if not args.no_weights and "token_weights" in ck.extras:
        weights = ck.extras["token_weights"]
    img = flowmatch.sample_bundle_frame(ck.model, ck.table, bundle, args.frame,
                                        args.steps, seed, grid,
                                        token_weights=weights, t_min=t_min)
    dataio.write_pgm(args.out, np.clip(img, 0.0, 1.0))
    print(f"sampled frame {args.frame} ({args.steps} Euler steps) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import dataio, metrics

    ref = dataio.read_bundle(args.ref)
    pred = dataio.read_bundle(args.pred)
    if args.mode == "consistency":
        ref_series = metrics.flow_series(ref.frames)
        pred_series = metrics.flow_series(pred.frames)
        total = dataio.write_consistency_report(args.out, ref_series, pred_series)
        if not args.no_figures:
            from . import plots
            plots.save_consistency_series(ref_series, pred_series,
                                          str(args.out) + ".png")
        print(f"consistency total error: {total:.6f}\nreport: {args.out}")
    else:
        ee = metrics.expression_error(ref.landmarks, pred.landmarks)
        dataio.write_expression_report(args.out, ee, ref.landmarks.shape[0],
                                       ref.landmarks.shape[1])
        print(f"expression error: {ee:.6f}\nreport: {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import autodiff as ad
    from . import flowmatch as fm
    from . import hashgrid as hg
    from . import synthdata as sd
    from . import trajectory as traj

    seed = args.seed if args.seed is not None else _default_seed()
    rng = np.random.default_rng(seed)
    suites: list[tuple[str, ad.FiniteDiffReport]] = []

    # composite catalog ops
    w1 = ad.parameter(rng.normal(scale=0.5, size=(6, 12)), name="w1")
    b1 = ad.parameter(rng.normal(scale=0.1, size=12), name="b1")
    w2 = ad.parameter(rng.normal(scale=0.5, size=(12, 1)), name="w2")
    x = ad.as_tensor(rng.normal(size=(9, 6)))
    y = ad.as_tensor(rng.normal(size=(9, 1)))

    def net_loss():
        h = ad.silu(ad.affine(x, w1, b1))
        return ad.squared_error(ad.matmul(h, w2), y)

    suites.append(("op catalog", ad.finite_diff_check(net_loss, [w1, b1, w2])))

    # hash-grid encode w.r.t. table entries
    grid = hg.HashGridConfig(levels=2, features=2, table_size=32,
                             res_min=4, res_max=8)
    table = hg.FeatureTable.create(grid, rng, init_scale=0.5)
    pts = rng.uniform(0, 1, size=(10, 3))
    plan = hg.build_plan(grid, pts)
    coef = ad.as_tensor(rng.normal(size=(10, grid.feature_dim)))

    def encode_loss():
        return ad.sum_(ad.mul(hg.encode_with_plan(table, plan), coef))

    suites.append(("hash encode", ad.finite_diff_check(encode_loss,
                                                       table.parameters())))

    # CFM loss through model and table
    bundle = sd.generate(sd.MotionSpec("translate", (1.0, 0.5)), 4, 32, 32)
    grid2 = hg.HashGridConfig(levels=2, features=2, table_size=64,
                              res_min=4, res_max=8)
    table2 = hg.FeatureTable.create(grid2, rng, init_scale=0.2)
    model = fm.VelocityModel.create(
        fm.ModelConfig(feature_dim=grid2.feature_dim, width=16,
                       pos_freqs=2, time_freqs=2), rng)
    plans = traj.build_frame_plans(grid2, 32, 32, 4)
    eps = rng.standard_normal((32, 32))

    def cfm():
        tokens = fm.frame_tokens(table2, bundle, 3, grid=4, plans=plans)
        return fm.cfm_loss(model, bundle.frames[2], tokens, bundle.frames[0],
                           0.37, eps)

    suites.append(("cfm loss", ad.finite_diff_check(
        cfm, model.parameters() + table2.parameters(), sample=100,
        rng=np.random.default_rng(seed + 1))))

    failed = False
    for name, report in suites:
        ok = report.ok(args.tolerance)
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:12s} "
              f"max rel err {report.max_rel_error:.3e}  "
              f"(mean {report.mean_rel_error:.3e}, {report.checked} components)")
    return 1 if failed else 0


def cmd_repro(args) -> int:
    import numpy as np

    from . import dataio, flowmatch, metrics, synthdata

    seed = args.seed if args.seed is not None else _default_seed()
    out = args.out
    os.makedirs(out, exist_ok=True)

    spec = synthdata.MotionSpec("translate", (2.0, 0.0), seed=seed)
    rendered = synthdata.generate(spec, args.frames, args.size, args.size)
    dataio.write_bundle(os.path.join(out, "rendered"), rendered)

    ns = argparse.Namespace(seed=seed, from_ckpt=None, steps=args.steps,
                            batch=4, lr=args.lr, token_grid=8, width=128,
                            levels=16, table_size=2 ** 14, dram=False,
                            dram_interval=100)
    model, table, cfg = _train_setup(ns, rendered)
    result = flowmatch.train(model, table, rendered, cfg)
    ckpt = os.path.join(out, "phase1.fym")
    dataio.write_checkpoint(ckpt, model, table, cfg,
                            extras={"weight_matrix": result.weight_matrix,
                                    "token_weights": result.token_weights})
    dataio.write_loss_curve(os.path.join(out, "train_loss.csv"), result.losses)

    edited = synthdata.apply_edit(rendered, "recolor", gamma=1.5)
    dataio.write_bundle(os.path.join(out, "edited"), edited)
    ck = dataio.read_checkpoint(ckpt)
    ft_cfg = flowmatch.TrainConfig(steps=args.finetune_steps, batch_size=4,
                                   learning_rate=args.lr, token_grid=8,
                                   seed=seed + 1, phase="finetune",
                                   dram=args.dram)
    ft_result = flowmatch.train(ck.model, ck.table, edited, ft_cfg,
                                reference_landmarks=rendered.landmarks)
    dataio.write_checkpoint(os.path.join(out, "phase2.fym"), ck.model, ck.table,
                            ft_cfg,
                            extras={"weight_matrix": ft_result.weight_matrix,
                                    "token_weights": ft_result.token_weights})
    dataio.write_loss_curve(os.path.join(out, "finetune_loss.csv"),
                            ft_result.losses)

    # reconstruct every frame from the phase-1 model and score it
    from . import trajectory as traj
    samples = np.empty_like(rendered.frames)
    psnr_rows = []
    plans = traj.build_frame_plans(table.config, rendered.height,
                                   rendered.width, rendered.frame_count)
    for k in range(rendered.frame_count):
        img = flowmatch.sample_bundle_frame(model, table, rendered, k + 1,
                                            args.sample_steps, seed + 2 + k,
                                            cfg.token_grid, plans)
        samples[k] = np.clip(img, 0.0, 1.0)
        dataio.write_pgm(os.path.join(out, f"sample_{k + 1:04d}.pgm"), samples[k])
        psnr_rows.append((k + 1, metrics.psnr(samples[k], rendered.frames[k])))
    mean_psnr = float(np.mean([r[1] for r in psnr_rows]))
    dataio.write_csv(os.path.join(out, "psnr.csv"), ["frame", "psnr_db"],
                     psnr_rows + [("mean", mean_psnr)])

    ref_series = metrics.flow_series(rendered.frames)
    sample_series = metrics.flow_series(samples)
    total = dataio.write_consistency_report(
        os.path.join(out, "consistency.csv"), ref_series, sample_series)

    pred_lms = np.stack([
        synthdata.predicted_landmarks(samples[k], rendered.frames[0],
                                      rendered.landmarks[0], wrap=True)
        for k in range(rendered.frame_count)])
    ee = metrics.expression_error(rendered.landmarks, pred_lms)
    dataio.write_expression_report(os.path.join(out, "expression.csv"), ee,
                                   rendered.frame_count, pred_lms.shape[1])

    if not args.no_figures:
        from . import plots
        plots.save_loss_curve(result.losses, os.path.join(out, "train_loss.png"))
        plots.save_loss_curve(ft_result.losses,
                              os.path.join(out, "finetune_loss.png"))
        plots.save_consistency_series(ref_series, sample_series,
                                      os.path.join(out, "consistency.png"),
                                      labels=("rendered", "sampled"))
        plots.save_frame_gallery({"rendered": rendered.frames,
                                  "sampled": samples},
                                 os.path.join(out, "gallery.png"))

    print(f"repro finished: mean PSNR {mean_psnr:.2f} dB, consistency total "
          f"{total:.4f}, expression error {ee:.4f}\nartifacts in {out}")
    return 0


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "repro": cmd_repro,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("trajflow: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"trajflow: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"trajflow: runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
