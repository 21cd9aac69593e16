"""Command-line entry point: ``invpt {train,eval,verify,bench,export-data}``.

Configuration is JSON. Built-in defaults are overlaid by ``--config``, then by
the explicit flags, then by ``--set dotted.key=value`` in the order given.
Every run echoes the effective configuration to ``<out>/config.resolved``.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import tensor as tn
from . import verify as vf
from .encoder import ConfigError
from .metrics import MetricReport, evaluate_predictions
from .model import (AdamState, CheckpointError, InvPTModel, ModelConfig, NonFiniteLoss, Trainer, evaluate,
                    load_checkpoint, model_from_checkpoint, save_checkpoint, timed_forward)
from .synthdata import SyntheticDataset, collate, export_sample, write_pnm

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
SUITES = ("gradcheck", "shapes", "oracle", "complexity")


class UsageError(Exception):
    pass


def default_config() -> dict:
    model = ModelConfig().to_dict()
    model.pop("seed")  # driven by the top-level seed
    model["encoder"]["tap_layers"] = None  # derived from depth unless set explicitly
    return {
        "out": "runs/invpt",
        "seed": 0,
        "jobs": 1,
        "model": json.loads(json.dumps(model)),
        "data": {"num_samples": 64, "num_shapes": 4},
        "train": {"iters": 200, "batch_size": 2, "ckpt_every": 50, "resume": False, "vis_samples": 2},
        "eval": {"checkpoint": "", "baseline": "", "split": "val"},
        "bench": {"stages": [1, 2, 3], "repeats": 3, "batch_size": 1},
    }


# ---------------------------------------------------------------- config plumbing


def merge(base: dict, extra: dict, path: str = "") -> dict:
    """Overlay ``extra`` on ``base``; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, val in extra.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    node = cfg
    for i, key in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, list):
            if not key.isdigit() or int(key) >= len(node):
                raise ConfigError(f"bad list index {key!r} in {dotted!r}")
            key = int(key)
        elif not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if last:
            node[key] = _parse_value(raw)
        else:
            node = node[key]


def resolve(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = merge(cfg, user)
    for flag, key in (("out", ("out",)), ("seed", ("seed",)), ("jobs", ("jobs",)), ("iters", ("train", "iters")),
                      ("checkpoint", ("eval", "checkpoint")), ("baseline", ("eval", "baseline"))):
        val = getattr(args, flag, None)
        if val is not None:
            node = cfg
            for k in key[:-1]:
                node = node[k]
            node[key[-1]] = val
    if getattr(args, "resume", False):
        cfg["train"]["resume"] = True
    for item in args.set or []:
        apply_override(cfg, item)
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    model_config(cfg)  # validate early
    return cfg


def model_config(cfg: dict, **changes) -> ModelConfig:
    d = dict(cfg["model"], seed=int(cfg["seed"]), **changes)
    mc = ModelConfig.from_dict(d)
    mc.validate()
    return mc


def write_resolved(cfg: dict) -> None:
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.resolved"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_dataset(cfg: dict, mc: ModelConfig) -> SyntheticDataset:
    classes = next((t.channels for t in mc.tasks if t.name == "semseg"), 5)
    return SyntheticDataset(int(cfg["seed"]), int(cfg["data"]["num_samples"]), *mc.image_size,
                            num_shapes=int(cfg["data"]["num_shapes"]), K=classes)


# ---------------------------------------------------------------- commands


def _dump_predictions(model: InvPTModel, samples, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    images, _ = collate(samples, model.cfg.tasks)
    pred = model.predict(images)
    for i, sample in enumerate(samples):
        write_pnm(os.path.join(out_dir, f"val_{i}_image.ppm"), np.round(sample.image * 255).astype(np.uint8))
        for t in model.cfg.tasks:
            p = pred[t.name][i]
            if t.kind == "continuous":
                arr = np.round(np.clip(p[0], 0, 1) * 65535).astype(np.uint16)
            elif t.channels == 2:
                arr = np.round(p[1] * 255).astype(np.uint8)
            else:
                arr = (p.argmax(0) * (255 // (t.channels - 1))).astype(np.uint8)
            write_pnm(os.path.join(out_dir, f"val_{i}_{t.name}.pgm"), arr)


def cmd_train(cfg: dict) -> int:
    mc = model_config(cfg)
    tc = cfg["train"]
    out = cfg["out"]
    ckpt = os.path.join(out, "checkpoint")
    model = InvPTModel(mc)
    trainer = Trainer(model, int(tc["iters"]), int(tc["batch_size"]), int(cfg["seed"]))
    if tc["resume"]:
        state = AdamState()
        trainer.iteration = load_checkpoint(model, ckpt, state)
        trainer.state = state
    data = make_dataset(cfg, mc)
    t0 = time.perf_counter()
    rows = trainer.fit(data, log_path=os.path.join(out, "train_log.csv"), ckpt_dir=ckpt,
                       ckpt_every=int(tc["ckpt_every"]))
    save_checkpoint(model, ckpt, trainer.iteration, trainer.state)
    vis = data.split("val")[: int(tc["vis_samples"])]
    if vis:
        _dump_predictions(model, vis, os.path.join(out, "predictions"))
    last = rows[-1]["loss_total"] if rows else float("nan")
    print(f"trained to iter={trainer.iteration} final_loss={last:.6g} "
          f"seconds={time.perf_counter() - t0:.1f} checkpoint={ckpt}")
    return EXIT_OK


EVAL_BATCH = 4


def _eval_chunk(ckpt: str, seed: int, n: int, num_shapes: int, indices: list[int]):
    model, _ = model_from_checkpoint(ckpt)
    mc = model.cfg
    cfg = {"seed": seed, "data": {"num_samples": n, "num_shapes": num_shapes}}
    data = make_dataset(cfg, mc)
    return evaluate(model, [data[i] for i in indices], EVAL_BATCH)


def evaluate_checkpoint(cfg: dict, ckpt: str) -> MetricReport:
    model, _ = model_from_checkpoint(ckpt)
    data = make_dataset(cfg, model.cfg)
    idx = {"train": data.train_indices, "val": data.val_indices}[cfg["eval"]["split"]]
    jobs = min(int(cfg["jobs"]), len(idx))
    if jobs <= 1:
        res = [evaluate(model, [data[i] for i in idx], EVAL_BATCH)]
    else:
        # split on eval-batch boundaries so each forward sees the same batch as a serial run
        batches = [list(idx[i : i + EVAL_BATCH]) for i in range(0, len(idx), EVAL_BATCH)]
        per = -(-len(batches) // jobs)
        chunks = [sum(batches[i : i + per], []) for i in range(0, len(batches), per)]
        args = (ckpt, int(cfg["seed"]), int(cfg["data"]["num_samples"]), int(cfg["data"]["num_shapes"]))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            res = list(pool.map(_eval_chunk, *zip(*[args + (c,) for c in chunks])))
    pred = {t.name: np.concatenate([r["pred"][t.name] for r in res]) for t in model.cfg.tasks}
    label = {t.name: np.concatenate([r["label"][t.name] for r in res]) for t in model.cfg.tasks}
    return evaluate_predictions(pred, label, model.cfg.tasks, model.cfg.ignore_index)


def cmd_eval(cfg: dict) -> int:
    ckpt = cfg["eval"]["checkpoint"] or os.path.join(cfg["out"], "checkpoint")
    report = evaluate_checkpoint(cfg, ckpt)
    base = cfg["eval"]["baseline"]
    if base:
        if os.path.isdir(base):
            baseline = evaluate_checkpoint(cfg, base)
        else:
            with open(base) as fh:
                baseline = MetricReport.from_csv(fh.read())
        report = report.with_baseline(baseline)
    with open(os.path.join(cfg["out"], "eval_report.csv"), "w") as fh:
        fh.write(report.to_csv())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _softmax_probe(seed: int = 0):
    rng = np.random.default_rng(seed)
    a = tn.Tensor(rng.standard_normal((6, 5)))
    v = tn.Tensor(rng.standard_normal((5, 4)))
    r = tn.Tensor(rng.standard_normal((6, 4)))
    return lambda: tn.sum_(tn.mul(tn.matmul(tn.softmax_rows(a), v), r)), {"a": a, "v": v}


def suite_gradcheck(cfg: dict):
    lines, ok = [], True
    checks = [("linear", vf.gradcheck_linear(), True), ("decoder", vf.gradcheck_decoder(), True)]
    with vf.corrupted_backward():
        fn, tensors = _softmax_probe()
        checks.append(("negative_control", vf.gradcheck(fn, tensors), False))
    rows = ["check,expect_pass,passed,worst_rel_err,checked,skipped"]
    for name, res, expect in checks:
        good = res.passed == expect
        ok &= good
        lines.append(f"{name}: {res.to_text()} {'ok' if good else 'UNEXPECTED'}")
        rows.append(f"{name},{int(expect)},{int(res.passed)},{res.worst_error!r},{res.checked},{res.skipped}")
    return ok, "\n".join(lines) + "\n", "\n".join(rows) + "\n"


def suite_shapes(cfg: dict):
    mc = model_config(cfg)
    main = vf.shape_suite(len(mc.tasks), *mc.grid, mc.c0)
    single = vf.shape_suite(1, 4, 4, 8)
    bad = vf.shape_suite(2, 8, 8, 66)
    ok = main.passed and single.passed and not bad.passed
    text = main.to_text() + f"single_task(1,4,4,8) {'PASS' if single.passed else 'FAIL'}\n"
    text += f"reject(2,8,8,66) {'ok' if not bad.passed else 'UNEXPECTED'}: {bad.error}\n"
    return ok, text, main.to_csv()


def suite_oracle(cfg: dict):
    main = vf.attention_oracle(seed=int(cfg["seed"]))
    zero = vf.attention_oracle(zero_input=True)
    wrong = vf.attention_oracle(k_override=lambda s: 2**s)
    ok = main.passed and zero.max_deviation == 0.0 and not wrong.passed
    text = main.to_text() + f"zero_input max_dev={zero.max_deviation:.3e}\n"
    text += f"wrong_k negative control {'ok' if not wrong.passed else 'UNEXPECTED'}\n"
    return ok, text, main.to_csv()


def suite_complexity(cfg: dict):
    mc = model_config(cfg)
    T, (H0, W0) = len(mc.tasks), mc.grid
    rep = vf.complexity_report(T, H0, W0, mc.c0, mc.num_stages)
    ok = all(r["cols"] == T * H0 * W0 // 4 for r in rep.stages)
    for a, b in zip(rep.stages, rep.stages[1:]):
        ok &= b["elements"] == 4 * a["elements"] and b["vanilla"] == 16 * a["vanilla"]
    return ok, rep.to_text() + f"complexity {'PASS' if ok else 'FAIL'}\n", rep.to_csv()


SUITE_FUNCS = {"gradcheck": suite_gradcheck, "shapes": suite_shapes, "oracle": suite_oracle,
               "complexity": suite_complexity}


def cmd_verify(cfg: dict, suite: str) -> int:
    names = SUITES if suite == "all" else (suite,)
    status = {}
    for name in names:
        ok, text, table = SUITE_FUNCS[name](cfg)
        with open(os.path.join(cfg["out"], f"verify_{name}.csv"), "w") as fh:
            fh.write(table)
        sys.stdout.write(f"== {name}\n{text}")
        status[name] = ok
    for name, ok in status.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all(status.values()) else EXIT_VERIFY


def cmd_bench(cfg: dict) -> int:
    bc = cfg["bench"]
    header = ["num_stages", "forward_seconds", "params", "attn_elements", "vanilla_elements", "peak_activations"]
    lines = [",".join(header)]
    for s in bc["stages"]:
        mc = model_config(cfg, num_stages=int(s))
        model = InvPTModel(mc)
        images = np.random.default_rng(int(cfg["seed"])).random((int(bc["batch_size"]), 3, *mc.image_size))
        secs = timed_forward(model, images.astype(np.float32), int(bc["repeats"]))
        rep = vf.complexity_report(len(mc.tasks), *mc.grid, mc.c0, int(s))
        n_params = sum(p.data.size for p in model.parameters())
        row = [s, f"{secs:.6f}", n_params, sum(r["elements"] for r in rep.stages),
               sum(r["vanilla"] for r in rep.stages), max(r["activations"] for r in rep.stages)]
        lines.append(",".join(str(v) for v in row))
    table = "\n".join(lines) + "\n"
    with open(os.path.join(cfg["out"], "bench.csv"), "w") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_export(cfg: dict) -> int:
    mc = model_config(cfg)
    data = make_dataset(cfg, mc)
    out = os.path.join(cfg["out"], "data")
    count = 0
    for split, idx in (("train", data.train_indices), ("val", data.val_indices)):
        for i in idx:
            count += len(export_sample(data[i], out, split, i))
    print(f"wrote {count} files to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file overlaid on the defaults")
    common.add_argument("--out", help="output directory (config: out)")
    common.add_argument("--seed", type=int, help="model init and data seed (config: seed)")
    common.add_argument("--iters", type=int, help="training iterations (config: train.iters)")
    common.add_argument("--jobs", type=int, help="worker processes for eval (config: jobs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-key override, e.g. model.c0=32; repeatable, applied last")
    parser = _Parser(prog="invpt", description="Multi-task inverted-pyramid decoder toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("train", parents=[common], help="train on synthetic scenes")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint (config: train.resume)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the val split")
    p.add_argument("--checkpoint", help="checkpoint directory (config: eval.checkpoint)")
    p.add_argument("--baseline", help="baseline checkpoint dir or report CSV for delta_m (config: eval.baseline)")
    p = sub.add_parser("verify", parents=[common], help="run verification suites")
    p.add_argument("suite", choices=("all",) + SUITES)
    sub.add_parser("bench", parents=[common], help="time forward passes for 1-3 decoder stages")
    sub.add_parser("export-data", parents=[common], help="write the synthetic dataset as PGM/PPM")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve(args)
        write_resolved(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.suite)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_export(cfg)
    except (NonFiniteLoss, tn.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
