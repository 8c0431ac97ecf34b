"""20-stage sequence -> slept / not-slept, with leave-one-subject-out evaluation."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .stage_model import N_CLASSES, POWER_FLOOR, StageLabel, TrainConfig, TrainHistory, fit, softmax

log = logging.getLogger(__name__)

SEQUENCE_LENGTH = 20
N_INPUTS = SEQUENCE_LENGTH * N_CLASSES


class SleepExperience(str, enum.Enum):
    NOT_SLEPT = "NotSlept"
    SLEPT = "Slept"

    @property
    def code(self) -> int:
        return 0 if self is SleepExperience.NOT_SLEPT else 1

    @classmethod
    def from_code(cls, code: int) -> "SleepExperience":
        return cls.SLEPT if code == 1 else cls.NOT_SLEPT

    @classmethod
    def parse(cls, text) -> "SleepExperience":
        if isinstance(text, SleepExperience):
            return text
        key = str(text).strip().lower()
        if key in ("slept", "s", "1", "yes", "true"):
            return cls.SLEPT
        if key in ("notslept", "not_slept", "n", "0", "no", "false"):
            return cls.NOT_SLEPT
        raise ValueError(f"unrecognised sleep experience {text!r}")


def as_sequence(seq) -> tuple[StageLabel, ...]:
    """Validate a 20-label stage sequence; accepts labels or a string like ``"WWN..."``."""
    labels = tuple(StageLabel(s) for s in seq)
    if len(labels) != SEQUENCE_LENGTH:
        raise ValueError(f"stage sequence must hold {SEQUENCE_LENGTH} labels, got {len(labels)}")
    return labels


def encode_sequence(seq) -> np.ndarray:
    """One-hot: index ``3*i + j`` is 1 iff stage ``i`` has label code ``j`` (W=0, N=1, R=2)."""
    out = np.zeros(N_INPUTS)
    for i, lab in enumerate(as_sequence(seq)):
        out[N_CLASSES * i + lab.code] = 1.0
    return out


@dataclass
class ExperienceNet:
    """Single fully-connected layer (2 x 60) with softmax over (NotSlept, Slept)."""

    w: np.ndarray
    b: np.ndarray

    PARAM_NAMES = ("w", "b")

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.shape != (2, N_INPUTS) or self.b.shape != (2,):
            raise ValueError(f"experience net shapes {self.w.shape}/{self.b.shape}, expected (2, 60)/(2,)")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("experience net has non-finite parameters")

    def params(self):
        return {"w": self.w, "b": self.b}

    @classmethod
    def from_params(cls, params):
        return cls(params["w"], params["b"])

    @classmethod
    def zeros(cls):
        return cls(np.zeros((2, N_INPUTS)), np.zeros(2))

    @classmethod
    def init(cls, seed: int = 0):
        rng = np.random.default_rng(seed)
        a = np.sqrt(6.0 / (N_INPUTS + 2))
        return cls(rng.uniform(-a, a, (2, N_INPUTS)), np.zeros(2))


def experience_probs(net: ExperienceNet, x) -> np.ndarray:
    return softmax(np.asarray(x, dtype=np.float64) @ net.w.T + net.b)


def predict_experience(net: ExperienceNet, seq) -> tuple[SleepExperience, float]:
    """Returns the predicted class and P(Slept). Exact ties go to NotSlept."""
    p = experience_probs(net, encode_sequence(seq))
    label = SleepExperience.SLEPT if p[1] > p[0] else SleepExperience.NOT_SLEPT
    return label, float(p[1])


def experience_loss(net: ExperienceNet, x, codes) -> float:
    p = experience_probs(net, np.atleast_2d(x))
    codes = np.asarray(codes)
    return float(np.mean(-np.log(np.maximum(p[np.arange(len(codes)), codes], POWER_FLOOR))))


def experience_gradient(net: ExperienceNet, x, codes) -> dict[str, np.ndarray]:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    codes = np.asarray(codes)
    n = x.shape[0]
    if n == 0 or len(codes) != n:
        raise ValueError("gradient needs a nonempty batch with one label per row")
    d = experience_probs(net, x)
    d[np.arange(n), codes] -= 1.0
    d /= n
    return {"w": d.T @ x, "b": d.sum(axis=0)}


@dataclass
class SubjectDataset:
    subject_id: str
    samples: list[tuple[tuple[StageLabel, ...], SleepExperience]]

    def __post_init__(self):
        self.samples = [(as_sequence(s), SleepExperience.parse(e)) for s, e in self.samples]
        if not self.samples:
            raise ValueError(f"subject {self.subject_id!r} has no samples")


def _design(subjects: Sequence[SubjectDataset]):
    rows = [(encode_sequence(s), e.code) for subj in subjects for s, e in subj.samples]
    if not rows:
        raise ValueError("training set is empty")
    return np.stack([r for r, _ in rows]), np.array([c for _, c in rows])


def experience_train_config(**overrides) -> TrainConfig:
    """Training preset for the experience layer: 300 epochs, minibatches of 16, lr 1e-2.

    Betas, epsilon and weight decay keep the optimizer defaults."""
    base = dict(epochs=300, batch_size=16, lr=1e-2)
    base.update(overrides)
    return TrainConfig(**base)


def train_experience(subjects: Sequence[SubjectDataset], config: TrainConfig | None = None):
    """Cross-entropy + Adam on one-hot sequences. Returns ``(net, history)``."""
    config = config or experience_train_config()
    if not subjects:
        raise ValueError("training set is empty")
    x, codes = _design(subjects)
    if len(np.unique(codes)) < 2:
        log.warning("experience training set contains a single class")
    params, history = fit(
        ExperienceNet.init(config.seed).params(), x, codes, config,
        lambda p, xx, cc: experience_loss(ExperienceNet.from_params(p), xx, cc),
        lambda p, xx, cc: experience_gradient(ExperienceNet.from_params(p), xx, cc),
        lambda p, xx, cc: float(np.mean(np.argmax(experience_probs(ExperienceNet.from_params(p), xx), axis=1) == cc)),
    )
    return ExperienceNet.from_params(params), history


# ---------------------------------------------------------------- metrics

def _pairs(preds, labels):
    preds = [SleepExperience.parse(p) for p in preds]
    labels = [SleepExperience.parse(y) for y in labels]
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("metrics need at least one sample")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _pairs(preds, labels)
    return sum(p == y for p, y in zip(preds, labels)) / len(labels)


def f1_per_class(preds, labels) -> dict[SleepExperience, Fraction]:
    """Exact per-class F1 = 2TP / (2TP + FP + FN); 0 when the denominator is 0."""
    preds, labels = _pairs(preds, labels)
    out = {}
    for cls in SleepExperience:
        tp = sum(p == cls and y == cls for p, y in zip(preds, labels))
        fp = sum(p == cls and y != cls for p, y in zip(preds, labels))
        fn = sum(p != cls and y == cls for p, y in zip(preds, labels))
        denom = 2 * tp + fp + fn
        out[cls] = Fraction(2 * tp, denom) if denom else Fraction(0)
    return out


def macro_f1(preds, labels) -> float:
    """Unweighted mean of the two class F1 scores, rounded once to float."""
    scores = f1_per_class(preds, labels)
    return float(sum(scores.values()) / len(scores))


# ---------------------------------------------------------------- LOSO

@dataclass
class SubjectResult:
    subject_id: str
    accuracy: float
    macro_f1: float
    n_samples: int = 0


@dataclass
class EvalReport:
    subjects: list[SubjectResult] = field(default_factory=list)

    def __post_init__(self):
        for r in self.subjects:
            for name in ("accuracy", "macro_f1"):
                v = getattr(r, name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"subject {r.subject_id}: {name}={v} outside [0, 1]")

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.subjects]))

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([r.macro_f1 for r in self.subjects]))

    def to_table(self) -> str:
        """Plain-text table: subject, ACC, F1, then the averages row."""
        lines = [f"{'Subject':<10}{'ACC':>8}{'F1':>8}"]
        for r in self.subjects:
            lines.append(f"{r.subject_id:<10}{r.accuracy:>8.3f}{r.macro_f1:>8.3f}")
        lines.append(f"{'Average':<10}{self.mean_accuracy:>8.3f}{self.mean_macro_f1:>8.3f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "subjects": [vars(r) for r in self.subjects],
            "mean_accuracy": self.mean_accuracy,
            "mean_macro_f1": self.mean_macro_f1,
        }, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_table(cls, text: str) -> "EvalReport":
        """Parse ``subject<TAB/space>ACC<space>F1`` rows; ``#`` comments and an
        ``Average`` row are ignored (averages are always recomputed)."""
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0].lower() in ("subject", "average"):
                continue
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'subject acc f1'")
            rows.append(SubjectResult(parts[0], float(parts[1]), float(parts[2])))
        return cls(rows)


def loso_folds(subject_ids: Sequence[str]):
    """Yield ``(test_id, train_ids)`` for each subject."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({s for s in ids if ids.count(s) > 1})
        raise ValueError(f"duplicate subject ids: {', '.join(dupes)}")
    for test in ids:
        yield test, [s for s in ids if s != test]


def check_fold(test_id, train_ids, all_ids) -> None:
    if test_id in train_ids:
        raise AssertionError(f"subject {test_id} leaked into its own training fold")
    if set(train_ids) | {test_id} != set(all_ids):
        raise AssertionError(f"fold for {test_id} does not cover the corpus")


def loso_evaluate(corpus: Sequence[SubjectDataset], config: TrainConfig | None = None) -> EvalReport:
    """Train on all-but-one subject, test on the held-out one, for every subject."""
    if len(corpus) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    by_id = {s.subject_id: s for s in corpus}
    ids = [s.subject_id for s in corpus]
    results = []
    seen_tests = []
    for test_id, train_ids in loso_folds(ids):
        check_fold(test_id, train_ids, ids)
        net, _ = train_experience([by_id[s] for s in train_ids], config)
        test = by_id[test_id]
        preds = [predict_experience(net, seq)[0] for seq, _ in test.samples]
        labels = [e for _, e in test.samples]
        acc = accuracy(preds, labels)
        n = len(labels)
        # accuracy must be a multiple of 1/n (e.g. 0, 0.2, ..., 1 for five samples)
        if abs(acc * n - round(acc * n)) > 1e-9:
            raise AssertionError(f"subject {test_id}: accuracy {acc} not a multiple of 1/{n}")
        results.append(SubjectResult(test_id, acc, macro_f1(preds, labels), n))
        seen_tests.append(test_id)
    if sorted(seen_tests) != sorted(ids):
        raise AssertionError("test folds do not partition the corpus")
    return EvalReport(results)


# ---------------------------------------------------------------- synthetic corpus

SLEPT_MIN_N = 6


def synthetic_experience_corpus(n_subjects: int = 19, per_subject: int = 5, seed: int = 0,
                                min_n: int = SLEPT_MIN_N) -> list[SubjectDataset]:
    """Subjects whose label is Slept iff at least ``min_n`` of 20 stages are N.

    Each subject gets a personal sleep propensity; sequences are wake, then a
    drift into N with occasional R and brief awakenings. Linearly separable by
    construction.
    """
    rng = np.random.default_rng(seed)
    corpus = []
    for s in range(n_subjects):
        propensity = rng.uniform(0.2, 0.8)
        samples = []
        for _ in range(per_subject):
            if rng.random() < propensity:
                onset = int(rng.integers(0, SEQUENCE_LENGTH - min_n - 2))
            else:
                onset = int(rng.integers(SEQUENCE_LENGTH - min_n + 3, SEQUENCE_LENGTH + 1))
            seq = []
            for i in range(SEQUENCE_LENGTH):
                if i < onset:
                    seq.append(StageLabel.R if rng.random() < 0.05 else StageLabel.W)
                else:
                    u = rng.random()
                    seq.append(StageLabel.W if u < 0.08 else StageLabel.R if u < 0.15 else StageLabel.N)
            n_count = sum(lab is StageLabel.N for lab in seq)
            samples.append((tuple(seq), SleepExperience.SLEPT if n_count >= min_n else SleepExperience.NOT_SLEPT))
        corpus.append(SubjectDataset(f"S{s + 1:02d}", samples))
    return corpus


def corpus_to_json(corpus: Sequence[SubjectDataset]) -> str:
    return json.dumps([
        {"subject": s.subject_id,
         "samples": [{"stages": "".join(l.value for l in seq), "experience": e.value} for seq, e in s.samples]}
        for s in corpus
    ], indent=2) + "\n"


def corpus_from_json(text: str) -> list[SubjectDataset]:
    data = json.loads(text)
    return [SubjectDataset(str(d["subject"]), [(x["stages"], x["experience"]) for x in d["samples"]])
            for d in data]
