"""Training, evaluation and comparison routines behind the command line."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from useg.autograd import AdamWState, CosineSchedule, adamw_step, backward, cosine_lr
from useg.backbone import ModelConfig
from useg.data import Sample, load_dataset, select
from useg.errors import CaseMismatch, DatasetMissing, InvalidConfig, NonFinite, SplitEmpty
from useg.losses import dice_ce_loss
from useg.metrics import MetricsReport, PerCaseMetrics, aggregate_report, dice_score, evaluate_case
from useg.model import SegmentationModel
from useg.stats import paired_test
from useg.text import Vocabulary

log = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = 1500


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = ""
    model: Mapping = field(default_factory=dict)
    fusion: str = "stage_add"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 5e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    fold: Optional[int] = None
    max_train_samples: Optional[int] = None
    eval_batch_size: int = 16

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.fold is not None and not 0 <= self.fold <= 4:
            raise InvalidConfig(f"fold must be 0..4, got {self.fold}")
        self.model_config(vocab_size=3)

    def model_config(self, vocab_size: int) -> ModelConfig:
        d = dict(self.model)
        d.update(fusion=self.fusion, seed=self.seed, vocab_size=vocab_size)
        return ModelConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = dict(self.model)
        return d


def batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def stack(samples: Sequence[Sample]):
    imgs = np.stack([s.image for s in samples])[:, None]
    masks = np.stack([s.mask for s in samples]).astype(np.uint8)
    return imgs, masks, [s.caption for s in samples]


def predict(model: SegmentationModel, samples: Sequence[Sample], batch_size: int = 16) -> List[np.ndarray]:
    preds = []
    for chunk in batches(list(samples), batch_size):
        imgs, _, caps = stack(chunk)
        _, mask = model.segment(imgs, caps if model.uses_text else None)
        preds.extend(mask)
    return preds


def mean_dice(model: SegmentationModel, samples: Sequence[Sample], batch_size: int = 16) -> float:
    if not samples:
        return float("nan")
    preds = predict(model, samples, batch_size)
    return float(np.mean([dice_score(p, s.mask) for p, s in zip(preds, samples)]))


def split_for_run(samples: Sequence[Sample], fold: Optional[int]):
    """(train, val) sample lists: by fold over train+val when ``fold`` is set, else by split name."""
    if fold is None:
        return select(samples, "train"), select(samples, "val")
    others = [f for f in range(5) if f != fold]
    return select(samples, cv=True, folds=others), select(samples, cv=True, folds=[fold])


def train(cfg: RunConfig, samples: Optional[Sequence[Sample]] = None, out_dir=None,
          progress: bool = False) -> dict:
    """Train one model; writes the best-validation checkpoint and train_log.json.

    Returns the training log as a dict.
    """
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    if samples is None:
        if not cfg.dataset or not (Path(cfg.dataset) / "manifest.json").exists():
            raise DatasetMissing(f"no dataset at {cfg.dataset!r}")
        samples, _ = load_dataset(cfg.dataset)
    train_set, val_set = split_for_run(samples, cfg.fold)
    if cfg.max_train_samples is not None:
        train_set = train_set[: cfg.max_train_samples]
    if not train_set:
        raise SplitEmpty("training set is empty")

    vocab = Vocabulary.build(s.caption for s in train_set)
    model = SegmentationModel(cfg.model_config(len(vocab)), vocab if cfg.fusion != "none" else None)
    spe = math.ceil(len(train_set) / cfg.batch_size)
    sched = CosineSchedule(total_steps=cfg.epochs * spe, lr_max=cfg.lr, lr_min=cfg.lr_min)
    state = AdamWState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)

    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    meta = {"run_config": cfg.to_dict(), "n_train": len(train_set), "n_val": len(val_set)}
    epochs: List[dict] = []
    best = -math.inf
    t0 = time.time()
    step = 0
    aborted = None
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        epoch_lr = cosine_lr(step, sched)
        losses = []
        try:
            for idx in batches(order, cfg.batch_size):
                imgs, masks, caps = stack([train_set[i] for i in idx])
                state.lr = cosine_lr(step, sched)
                model.store.zero_grad()
                loss = dice_ce_loss(model.logits(imgs, caps if model.uses_text else None), masks)
                grads = backward(loss)
                adamw_step(model.store, grads, state)
                losses.append(float(loss.item()))
                step += 1
        except NonFinite as exc:
            aborted = f"epoch {epoch}: {exc}"
            log.error("training aborted, keeping last good checkpoint: %s", aborted)
            break
        val = mean_dice(model, val_set, cfg.eval_batch_size) if val_set else float("nan")
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val, "lr": epoch_lr,
               "step": epoch * spe}
        epochs.append(rec)
        score = val if val_set else -rec["train_loss"]
        if score > best:
            best = score
            model.save(ckpt, dict(meta, epoch=epoch, val_dice=val))
        if progress:
            print(json.dumps(rec), flush=True)

    final_train_dice = mean_dice(model, train_set, cfg.eval_batch_size)
    train_log = {
        "epochs": epochs,
        "steps_per_epoch": spe,
        "total_steps": sched.total_steps,
        "best_val_dice": best if val_set else None,
        "final_train_dice": final_train_dice,
        "checkpoint": str(ckpt.with_suffix(".json")),
        "wall_time_s": time.time() - t0,
        "aborted": aborted,
        "full_scale_epochs": FULL_SCALE_EPOCHS,
    }
    (out / "train_log.json").write_text(json.dumps(train_log, indent=2))
    if aborted:
        raise NonFinite(aborted)
    return train_log


def evaluate(model: SegmentationModel, samples: Sequence[Sample], model_name: str = "", split: str = "",
             batch_size: int = 16) -> MetricsReport:
    if not samples:
        raise SplitEmpty(f"split {split!r} has no samples")
    preds = predict(model, samples, batch_size)
    cases = [evaluate_case(s.sample_id, p, s.mask) for p, s in zip(preds, samples)]
    return aggregate_report(cases, model=model_name, split=split)


def compare(cases_a: Sequence[PerCaseMetrics], cases_b: Sequence[PerCaseMetrics]) -> dict:
    """Mean deltas (a - b) per metric and a paired signed-rank test on Dice."""
    ia = {c.case_id: c for c in cases_a}
    ib = {c.case_id: c for c in cases_b}
    if set(ia) != set(ib):
        only_a = sorted(set(ia) - set(ib))
        only_b = sorted(set(ib) - set(ia))
        raise CaseMismatch(f"case ids differ; only in A: {only_a}, only in B: {only_b}")
    ids = sorted(ia)
    out = {"n": len(ids), "metrics": {}}
    for m in ("dice", "jaccard", "hd95", "sensitivity", "specificity"):
        pairs = [(getattr(ia[i], m), getattr(ib[i], m)) for i in ids]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        if not pairs:
            continue
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        out["metrics"][m] = {"mean_a": float(a.mean()), "mean_b": float(b.mean()),
                             "delta": float(a.mean() - b.mean())}
    res = paired_test([ia[i].dice for i in ids], [ib[i].dice for i in ids])
    out["dice_test"] = {"test": "wilcoxon_signed_rank_two_sided", "statistic": res.statistic, "p": res.p,
                        "n_nonzero": res.n, "method": res.method}
    return out


def format_comparison(cmp: dict, name_a: str = "A", name_b: str = "B") -> str:
    rows = [f"{'metric':<12} {name_a:>12} {name_b:>12} {'delta':>10}"]
    for m, s in cmp["metrics"].items():
        rows.append(f"{m:<12} {s['mean_a']:>12.4f} {s['mean_b']:>12.4f} {s['delta']:>+10.4f}")
    t = cmp["dice_test"]
    rows.append(f"Dice Wilcoxon signed-rank: W+={t['statistic']:.1f}, p={t['p']:.3g} ({t['method']}, n={t['n_nonzero']})")
    return "\n".join(rows)
