"""Experiment configs and the report-producing commands behind the CLI.

Every command takes a validated :class:`ExperimentConfig` and an output
directory, writes its files from a single place once all trials are done, and
returns an exit status (0 only if nothing failed and every check passed).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import jsonschema
import numpy as np

from laurel.data import Dataset, gen_gaussian_mixture, gen_spirals, load_idx
from laurel.layers import Variant, param_count
from laurel.model import (
    Model,
    ModelConfig,
    build,
    count_params,
    forward,
    naive_scale,
    save_checkpoint,
    vanilla_param_count,
)
from laurel.tensor import backward, cross_entropy, finite_diff_grad
from laurel.training import TrainConfig, TrialSummary, run_trials, train_model

logger = logging.getLogger(__name__)

_DATA_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "num_classes", "dim", "n_train_per_class", "n_eval_per_class",
                         "spread", "seed"],
            "properties": {
                "kind": {"const": "gaussian_mixture"},
                "num_classes": {"type": "integer", "minimum": 2},
                "dim": {"type": "integer", "minimum": 2},
                "n_train_per_class": {"type": "integer", "minimum": 1},
                "n_eval_per_class": {"type": "integer", "minimum": 1},
                "spread": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "num_classes", "n_train_per_class", "n_eval_per_class",
                         "noise", "seed"],
            "properties": {
                "kind": {"const": "spirals"},
                "num_classes": {"type": "integer", "minimum": 2},
                "n_train_per_class": {"type": "integer", "minimum": 1},
                "n_eval_per_class": {"type": "integer", "minimum": 1},
                "noise": {"type": "number", "minimum": 0},
                "turns": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "train_images", "train_labels", "eval_images", "eval_labels",
                         "num_classes"],
            "properties": {
                "kind": {"const": "idx"},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "eval_images": {"type": "string"},
                "eval_labels": {"type": "string"},
                "num_classes": {"type": "integer", "minimum": 2},
            },
        },
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "model", "train"],
    "properties": {
        "data": _DATA_SCHEMA,
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["width", "num_blocks"],
            "properties": {
                "width": {"type": "integer", "minimum": 1},
                "num_blocks": {"type": "integer", "minimum": 1},
                "hidden_mult": {"type": "integer", "minimum": 1},
                "rw_norm": {"enum": ["softmax", "sigmoid", "none"]},
                "pa_literal": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["steps"],
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "cosine": {"type": "boolean"},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "eval_every": {"type": "integer", "minimum": 1},
            },
        },
        "variants": {"type": "array", "items": {"enum": [v.value for v in Variant]}},
        "ranks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "workers": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: dict
    model: dict
    train: TrainConfig
    variants: list[Variant]
    ranks: list[int]
    seeds: list[int]
    workers: int = 1
    out: str | None = None
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        seeds = raw.get("seeds", [0])
        try:
            train = TrainConfig(seeds=tuple(seeds), **raw["train"])
        except ValueError as exc:
            raise ConfigError(f"invalid train section: {exc}") from None
        return cls(
            data=raw["data"],
            model=raw["model"],
            train=train,
            variants=[Variant.parse(v) for v in raw.get("variants", [])],
            ranks=list(raw.get("ranks", [])),
            seeds=list(seeds),
            workers=raw.get("workers", 1),
            out=raw.get("out"),
            base_dir=Path(base_dir),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        return replace(self, seeds=list(seeds), train=self.train.replace(seeds=tuple(seeds)))

    # -- derived pieces ------------------------------------------------------

    def input_dim(self) -> int:
        d = self.data
        if d["kind"] == "gaussian_mixture":
            return d["dim"]
        if d["kind"] == "spirals":
            return 2
        raw = (self.base_dir / d["train_images"]).read_bytes()[:16]
        if len(raw) < 16:
            raise ConfigError(f"{d['train_images']}: truncated IDX header")
        _, _, rows, cols = struct.unpack(">4I", raw)
        return rows * cols

    def num_classes(self) -> int:
        return self.data["num_classes"]

    def model_config(self, variant: Variant = Variant.VANILLA, rank: int | None = None,
                     seed: int = 0) -> ModelConfig:
        m = self.model
        return ModelConfig(
            input_dim=self.input_dim(),
            width=m["width"],
            num_blocks=m["num_blocks"],
            num_classes=self.num_classes(),
            hidden_mult=m.get("hidden_mult", 4),
            variant=variant,
            rank=rank if variant.has_rank else None,
            rw_norm=m.get("rw_norm", "softmax"),
            pa_literal=m.get("pa_literal", False),
            seed=seed,
        )

    def datasets(self) -> tuple[Dataset, Dataset]:
        d = self.data
        if d["kind"] == "gaussian_mixture":
            args = (d["num_classes"], d["dim"])
            seed = d["seed"]
            train = gen_gaussian_mixture(*args, d["n_train_per_class"], d["spread"], seed,
                                         "train", sample_seed=2 * seed + 1)
            test = gen_gaussian_mixture(*args, d["n_eval_per_class"], d["spread"], seed,
                                        "eval", sample_seed=2 * seed + 2)
            return train, test
        if d["kind"] == "spirals":
            turns = d.get("turns", 1.0)
            train = gen_spirals(d["num_classes"], d["n_train_per_class"], d["noise"],
                                2 * d["seed"] + 1, "train", turns)
            test = gen_spirals(d["num_classes"], d["n_eval_per_class"], d["noise"],
                               2 * d["seed"] + 2, "eval", turns)
            return train, test
        b = self.base_dir
        train = load_idx(b / d["train_images"], b / d["train_labels"], d["num_classes"], "train")
        test = load_idx(b / d["eval_images"], b / d["eval_labels"], d["num_classes"], "eval")
        return train, test

    def variant_rows(self) -> list[tuple[Variant, int | None]]:
        """(variant, rank) pairs; rank-free variants appear once."""
        rows = []
        for v in self.variants:
            if v.has_rank:
                if not self.ranks:
                    raise ConfigError(f"variant {v.value} needs at least one rank")
                rows.extend((v, r) for r in self.ranks)
            else:
                rows.append((v, None))
        return rows

    def check_ranks(self, ranks=None) -> None:
        D = self.model["width"]
        for r in self.ranks if ranks is None else ranks:
            if r > D:
                raise ConfigError(f"rank {r} exceeds model width D={D}")


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.4f}"
    return str(v)


def format_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[_fmt(v) for v in row] for row in rows])
    return buf.getvalue()


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if k == 0 or i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _write_report(out: Path, header, rows, extra_text: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(format_csv(header, rows))
    (out / "report.txt").write_text(format_table(header, rows) + extra_text)


def _jsonl(lines: list[dict]) -> str:
    return "".join(json.dumps(d, sort_keys=True) + "\n" for d in lines)


def _pct(added: int, base: int) -> float:
    return 100.0 * added / base


# ---------------------------------------------------------------------------
# param-count
# ---------------------------------------------------------------------------

PARAM_HEADER = ["model", "rank", "params_total", "params_added", "params_added_closed_form",
                "params_added_pct"]


def param_rows(cfg: ExperimentConfig) -> list[list]:
    """Added parameters per (variant, rank), enumerated and in closed form."""
    base = cfg.model_config()
    vanilla_total = count_params(build(base))
    if vanilla_total != vanilla_param_count(base):
        raise AssertionError("vanilla enumeration disagrees with its closed form")
    D, N = base.width, base.num_blocks
    rows = [["vanilla", None, vanilla_total, 0, 0, 0.0]]
    for v, r in [(Variant.VANILLA, None)] + cfg.variant_rows():
        if v is Variant.VANILLA:
            continue
        total = count_params(build(cfg.model_config(v, r)))
        rows.append([v.label(r), r, total, total - vanilla_total, param_count(v, D, N, r),
                     _pct(total - vanilla_total, vanilla_total)])
    return rows


def _pct_text(rows) -> str:
    return "".join(f"{row[0]}: {row[-1]:.3f}% added\n" for row in rows)


def cmd_param_count(cfg: ExperimentConfig, out: Path) -> int:
    cfg.check_ranks()
    rows = param_rows(cfg)
    ok = all(row[3] == row[4] for row in rows)
    _write_report(Path(out), PARAM_HEADER, rows, "\n" + _pct_text(rows))
    if not ok:
        logger.error("closed-form and enumerated parameter counts disagree")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_CASES = [
    ("vanilla", Variant.VANILLA, {}),
    ("rw[softmax]", Variant.RW, {"rw_norm": "softmax"}),
    ("rw[sigmoid]", Variant.RW, {"rw_norm": "sigmoid"}),
    ("rw[none]", Variant.RW, {"rw_norm": "none"}),
    ("lr", Variant.LR, {}),
    ("pa", Variant.PA, {}),
    ("pa[literal]", Variant.PA, {"pa_literal": True}),
    ("rw+lr", Variant.RW_LR, {}),
    ("rw+lr+pa", Variant.RW_LR_PA, {}),
]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def param_group(name: str) -> str:
    """Strip the block index: ``block3.lr.A`` -> ``lr.A``, ``block0.W1`` -> ``W1``."""
    head, _, rest = name.partition(".")
    return rest if head.startswith("block") and head[5:].isdigit() else name


def randomize_residual(model: Model, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Move every residual parameter off its (degenerate) initial value."""
    for t in model.residual.named_tensors().values():
        t.data[...] = rng.uniform(-scale, scale, t.shape)


def gradcheck_model(model: Model, x: np.ndarray, y: np.ndarray, per_group: int = 8,
                    h: float = 1e-5, seed: int = 0, corrupt_group: str | None = None) -> dict[str, float]:
    """Max relative error between backward and central differences, per parameter group.

    ``corrupt_group`` perturbs the analytic gradient of one group; it exists so
    tests can confirm that the check fails loudly.
    """
    params = model.parameters()
    loss = cross_entropy(forward(model, x), y)
    grads = backward(loss)
    names, offsets, off = list(params), {}, 0
    for n in names:
        offsets[n] = off
        off += params[n].size
    analytic = np.concatenate([grads.get(params[n], np.zeros(params[n].shape)).ravel()
                               for n in names])

    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for n in names:
        groups.setdefault(param_group(n), []).extend(
            range(offsets[n], offsets[n] + params[n].size))
    chosen = {g: sorted(rng.choice(idx, min(per_group, len(idx)), replace=False).tolist())
              for g, idx in groups.items()}
    if corrupt_group is not None:
        if corrupt_group not in chosen:
            raise KeyError(f"no parameter group {corrupt_group!r}")
        analytic[chosen[corrupt_group]] += 1e-3 + 1e-2 * np.abs(analytic[chosen[corrupt_group]])

    p0 = model.flat()

    def f(vec):
        model.set_flat(vec)
        return cross_entropy(forward(model, x), y).item()

    all_idx = [i for g in chosen.values() for i in g]
    try:
        numeric = finite_diff_grad(f, p0, h, indices=all_idx)
    finally:
        model.set_flat(p0)
    return {g: float(relative_error(analytic[idx], numeric[idx]).max())
            for g, idx in chosen.items()}


def run_gradcheck(width: int = 6, num_blocks: int = 3, rank: int = 2, hidden_mult: int = 2,
                  input_dim: int = 5, num_classes: int = 4, batch: int = 4, seed: int = 0,
                  per_group: int = 8, corrupt: tuple[str, str] | None = None) -> list[dict]:
    """Gradient check of every variant on a small random network."""
    rng = np.random.default_rng([seed, 99])
    x = rng.uniform(-1, 1, (batch, input_dim))
    y = rng.integers(0, num_classes, batch)
    out = []
    for label, variant, extra in GRADCHECK_CASES:
        cfg = ModelConfig(input_dim, width, num_blocks, num_classes, hidden_mult, variant,
                          rank if variant.has_rank else None, seed=seed, **extra)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = build(cfg)
        randomize_residual(model, np.random.default_rng([seed, 7]))
        bad = corrupt[1] if corrupt and corrupt[0] == label else None
        errs = gradcheck_model(model, x, y, per_group, seed=seed, corrupt_group=bad)
        out.extend({"case": label, "group": g, "max_rel_error": e} for g, e in errs.items())
    return out


GRADCHECK_TOL = 1e-6


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, corrupt: tuple[str, str] | None = None) -> int:
    m = cfg.model
    D, N = m["width"], m["num_blocks"]
    if D > 16 or N > 4:
        raise ConfigError(f"gradcheck needs a small model (D <= 16, N <= 4), got D={D}, N={N}")
    rank = cfg.ranks[0] if cfg.ranks else min(2, D)
    cfg.check_ranks([rank])
    seed = cfg.seeds[0]
    results = run_gradcheck(D, N, rank, m.get("hidden_mult", 4), cfg.input_dim(),
                            cfg.num_classes(), seed=seed, corrupt=corrupt)
    header = ["case", "group", "max_rel_error", "status"]
    rows = [[r["case"], r["group"], f"{r['max_rel_error']:.3e}",
             "pass" if r["max_rel_error"] < GRADCHECK_TOL else "FAIL"] for r in results]
    failed = [f"{r[0]}:{r[1]}" for r in rows if r[3] == "FAIL"]
    summary = "\nall groups within tolerance\n" if not failed else \
        "\nfailed groups: " + ", ".join(failed) + "\n"
    _write_report(Path(out), header, rows, summary)
    for name in failed:
        logger.error("gradient check failed for %s", name)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# compare / sweep-rank / train
# ---------------------------------------------------------------------------

TRIAL_HEADER = ["model", "rank", "mean_best_acc1", "std", "median", "trials", "failures",
                "params_added", "params_added_closed_form", "params_added_pct"]


def _trial_row(label, rank, summary: TrialSummary, added, closed, base_total) -> list:
    return [label, rank, summary.mean, summary.std, summary.median, len(summary.results),
            summary.failures, added, closed, _pct(added, base_total)]


def _metric_lines(label: str, summary: TrialSummary) -> list[dict]:
    lines = []
    for res, recs in zip(summary.results, summary.metrics):
        for rec in recs:
            lines.append({"model": label, "seed": res.seed, **rec.to_dict()})
    return lines


def _run(cfg, train, test, mcfg) -> TrialSummary:
    return run_trials(mcfg, cfg.train, train, test, cfg.seeds, cfg.workers)


def cmd_compare(cfg: ExperimentConfig, out: Path) -> int:
    """Baseline, naive +1 block, and each requested variant, all on one dataset."""
    cfg.check_ranks()
    train, test = cfg.datasets()
    base = cfg.model_config()
    base_total = count_params(build(base))
    D, H, N = base.width, base.hidden_mult * base.width, base.num_blocks

    plan = [("vanilla", None, base, 0),
            ("naive+1 block", None, naive_scale(base), D * H + H + H * D + D)]
    for v, r in cfg.variant_rows():
        plan.append((v.label(r), r, cfg.model_config(v, r), param_count(v, D, N, r)))

    rows, metrics, trials = [], [], []
    for label, rank, mcfg, closed in plan:
        logger.info("compare: running %s", label)
        summary = _run(cfg, train, test, mcfg)
        added = count_params(build(mcfg)) - base_total
        rows.append(_trial_row(label, rank, summary, added, closed, base_total))
        metrics.extend(_metric_lines(label, summary))
        trials.append({"model": label, "results": [r.to_dict() for r in summary.results]})

    out = Path(out)
    _write_report(out, TRIAL_HEADER, rows)
    (out / "metrics.jsonl").write_text(_jsonl(metrics))
    (out / "summary.json").write_text(json.dumps(trials, indent=1, sort_keys=True) + "\n")
    failures = sum(row[6] for row in rows)
    mismatched = [row[0] for row in rows if row[7] != row[8]]
    if mismatched:
        logger.error("parameter count mismatch for %s", mismatched)
    return 0 if failures == 0 and not mismatched else 1


SWEEP_HEADER = ["rank", "mean_best_acc1", "std", "median", "trials", "failures",
                "params_added", "params_added_closed_form", "params_added_pct"]


def cmd_sweep_rank(cfg: ExperimentConfig, out: Path) -> int:
    """RW+LR at every configured rank: the accuracy-vs-rank curve."""
    if not cfg.ranks:
        raise ConfigError("sweep-rank needs a non-empty rank list")
    cfg.check_ranks()
    train, test = cfg.datasets()
    base = cfg.model_config()
    base_total = count_params(build(base))
    rows, metrics = [], []
    for r in cfg.ranks:
        mcfg = cfg.model_config(Variant.RW_LR, r)
        summary = _run(cfg, train, test, mcfg)
        added = count_params(build(mcfg)) - base_total
        closed = param_count(Variant.RW_LR, base.width, base.num_blocks, r)
        rows.append(_trial_row(r, r, summary, added, closed, base_total)[1:])
        metrics.extend(_metric_lines(Variant.RW_LR.label(r), summary))
    out = Path(out)
    _write_report(out, SWEEP_HEADER, rows)
    (out / "metrics.jsonl").write_text(_jsonl(metrics))
    failures = sum(row[5] for row in rows)
    return 0 if failures == 0 and all(row[6] == row[7] for row in rows) else 1


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    """One trial of the first configured variant; writes checkpoint and metrics."""
    variant = cfg.variants[0] if cfg.variants else Variant.VANILLA
    rank = cfg.ranks[0] if variant.has_rank and cfg.ranks else None
    if rank is not None:
        cfg.check_ranks([rank])
    train, test = cfg.datasets()
    seed = cfg.seeds[0]
    mcfg = cfg.model_config(variant, rank, seed)
    model, result, records = train_model(mcfg, cfg.train, train, test, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.jsonl").write_text(_jsonl([r.to_dict() for r in records]))
    (out / "summary.json").write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    if result.failed:
        logger.error("training diverged: %s", result.error)
        return 1
    save_checkpoint(model, out / "checkpoint.bin")
    return 0
