"""Top-1 accuracy on clean/corrupted test suites and comparison tables.

The CSV is the single source of truth (schema v1: model_id, seed, suite,
seen_flag, accuracy); the human-readable table is derived from the same
result objects and both are byte-stable given identical inputs.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .objective import ModelBundle

CSV_HEADER = "model_id,seed,suite,seen_flag,accuracy"

# reference accuracies from the original full-scale runs (60k train set,
# 15-corruption suite), quoted for orientation under every desk-scale table
FULL_SCALE_REFERENCE = (
    ("baseline", 99.13, 86.86),
    ("gnt", 99.40, 92.39),
    ("gnt-nls", 99.44, 92.51),
)


@dataclass(frozen=True)
class SuiteSpec:
    """A named test set; seen is True/False for corrupted suites relative to
    the training policy, None for the clean set."""

    name: str
    dataset: Dataset
    seen: bool = None


@dataclass(frozen=True)
class SuiteResult:
    name: str
    seen: bool
    accuracy: float


@dataclass(frozen=True)
class EvalResult:
    model_id: str
    seed: int
    config_hash: str
    suites: tuple

    def __post_init__(self):
        for s in self.suites:
            if not 0 <= s.accuracy <= 1:
                raise ValueError(f"suite {s.name}: accuracy {s.accuracy} outside [0,1]")

    def _mean(self, flags) -> float:
        accs = [s.accuracy for s in self.suites if s.seen in flags]
        return float(np.mean(accs)) if accs else None

    @property
    def clean_accuracy(self):
        return self._mean({None})

    @property
    def corrupted_mean(self):
        return self._mean({True, False})

    @property
    def seen_mean(self):
        return self._mean({True})

    @property
    def unseen_mean(self):
        return self._mean({False})


def evaluate(bundle: ModelBundle, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of the task head; argmax ties go to the lowest class."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    hits = 0
    with T.no_grad():
        for lo in range(0, len(ds), batch_size):
            imgs = T.Tensor(ds.images.data[lo:lo + batch_size])
            logits = bundle.task_logits(bundle.features(imgs))
            pred = np.argmax(logits.data, axis=1)
            hits += int((pred == ds.task_labels[lo:lo + batch_size]).sum())
    return hits / len(ds)


def corruption_suite(bundle: ModelBundle, suites, model_id: str = "model",
                     seed: int = 0, config_hash: str = "") -> EvalResult:
    results = tuple(SuiteResult(s.name, s.seen, evaluate(bundle, s.dataset))
                    for s in suites)
    return EvalResult(model_id, seed, config_hash, results)


def _check_same_suites(results):
    # seen flags are relative to each model's own training policy, so only
    # the suite names have to line up across results
    if not results:
        raise ValueError("empty result list")
    names = [tuple(s.name for s in r.suites) for r in results]
    if any(n != names[0] for n in names[1:]):
        raise ValueError(f"mismatched suites across results: {sorted(set(names))}")


def to_csv(results) -> str:
    """Schema v1 rows, sorted by (model_id, seed, suite order)."""
    _check_same_suites(results)
    lines = [CSV_HEADER]
    for r in sorted(results, key=lambda r: (r.model_id, r.seed)):
        for s in r.suites:
            flag = "clean" if s.seen is None else ("seen" if s.seen else "unseen")
            lines.append(f"{r.model_id},{r.seed},{s.name},{flag},{s.accuracy:.6f}")
    return "\n".join(lines) + "\n"


def from_csv(text: str) -> list:
    """Parse schema v1 rows back into EvalResults (config hashes live in
    filenames and manifests, not rows, so they come back empty)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"bad CSV header; expected {CSV_HEADER!r}")
    rows = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise ValueError(f"bad CSV row: {ln!r}")
        model, seed, suite, flag, acc = parts
        if flag not in ("clean", "seen", "unseen"):
            raise ValueError(f"bad seen flag {flag!r} in row {ln!r}")
        seen = None if flag == "clean" else flag == "seen"
        rows.setdefault((model, int(seed)), []).append(
            SuiteResult(suite, seen, float(acc)))
    return [EvalResult(m, s, "", tuple(suites))
            for (m, s), suites in rows.items()]


def aggregate(results) -> dict:
    """Per-model means over seeds of the four summary accuracies."""
    _check_same_suites(results)
    by_model = {}
    for r in results:
        by_model.setdefault(r.model_id, []).append(r)

    def agg(rs, prop):
        vals = [getattr(r, prop) for r in rs]
        if vals[0] is None:
            return None
        return float(np.mean(vals))

    return {m: {"seeds": len(rs),
                **{p: agg(rs, p) for p in ("clean_accuracy", "seen_mean",
                                           "unseen_mean", "corrupted_mean")}}
            for m, rs in by_model.items()}


def compare_report(results, baseline_id: str) -> str:
    """Aligned per-model comparison with deltas against the named baseline."""
    stats = aggregate(results)
    if baseline_id not in stats:
        raise ValueError(f"baseline id {baseline_id!r} not among results "
                         f"{sorted(stats)}")
    base = stats[baseline_id]

    def fmt(x):
        return "   --  " if x is None else f"{100 * x:7.2f}"

    def fmtd(x, b):
        return "   --  " if (x is None or b is None) else f"{100 * (x - b):+7.2f}"

    lines = []
    lines.append(f"{'model':<12} {'seeds':>5} {'clean':>7} {'seen':>7} "
                 f"{'unseen':>7} {'corrupt':>7} {'d-clean':>8} {'d-corr':>8}")
    for m in sorted(stats):
        s = stats[m]
        lines.append(
            f"{m:<12} {s['seeds']:>5} {fmt(s['clean_accuracy'])} "
            f"{fmt(s['seen_mean'])} {fmt(s['unseen_mean'])} "
            f"{fmt(s['corrupted_mean'])} "
            f"{fmtd(s['clean_accuracy'], base['clean_accuracy']):>8} "
            f"{fmtd(s['corrupted_mean'], base['corrupted_mean']):>8}")
    lines.append("")
    lines.append("full-scale reference (60k train, 15-corruption suite):")
    for name, clean, corr in FULL_SCALE_REFERENCE:
        lines.append(f"  {name:<12} clean {clean:.2f}  corrupted-mean {corr:.2f}")
    return "\n".join(lines) + "\n"
