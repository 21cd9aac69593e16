"""Train a small multi-task model on synthetic scenes, then compare it to single-task baselines.

Run with ``python3 demos/train_toy.py``. Takes about a minute on one core.
"""

from invpt.encoder import EncoderConfig
from invpt.metrics import MetricReport, evaluate_predictions
from invpt.model import InvPTModel, ModelConfig, Trainer, evaluate
from invpt.synthdata import SyntheticDataset

ITERS = 300


def small(tasks=None) -> ModelConfig:
    cfg = ModelConfig(image_size=(64, 64), c0=32, cd=32,
                      encoder=EncoderConfig(patch_size=8, embed_dim=32, depth=3))
    if tasks is not None:
        cfg.tasks = tasks
    return cfg


def train_and_score(cfg: ModelConfig, data: SyntheticDataset):
    trainer = Trainer(InvPTModel(cfg), iters=ITERS, batch_size=2)
    rows = trainer.fit(data)
    r = evaluate(trainer.model, data.split("val"))
    return rows, evaluate_predictions(r["pred"], r["label"], cfg.tasks)


def main() -> None:
    data = SyntheticDataset(0, 32, 64, 64)
    cfg = small()
    rows, multi = train_and_score(cfg, data)
    print(f"multi-task loss {rows[0]['loss_total']:.3f} -> {rows[-1]['loss_total']:.3f}")
    print(multi.to_text(), end="")

    single_values, lib = {}, {}
    for task in cfg.tasks:
        _, rep = train_and_score(small([task]), data)
        single_values.update(rep.values)
        lib.update(rep.lower_is_better)
    baseline = MetricReport(single_values, lib)
    print("single-task baselines:")
    print(baseline.to_text(), end="")
    print(f"delta_m of the multi-task model: {multi.with_baseline(baseline).delta_m:+.2f}%")


if __name__ == "__main__":
    main()
