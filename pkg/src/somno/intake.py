"""Scoring of PSQI, BRUMS and PVT, and rule-based stimulus selection.

Intake answers are a ``key = value`` text document::

    q1 = 23:30          # PSQI: bedtime
    q2 = 20             # minutes to fall asleep
    q3 = 07:00          # getting-up time
    q4 = 6.5            # hours of actual sleep
    q5a = 1             # ... q5j, q6 .. q9: ratings 0-3
    brums_1 = 0         # ... brums_24: ratings 0-4
    pvt = 312, 287, FS, 640, ...   # reaction times in ms, FS = false start

Policies are ordered ``IF <field> <op> <number> [AND ...] THEN <stimulus>``
lines plus one ``DEFAULT <stimulus>`` line.
"""

from __future__ import annotations

import hashlib
import json
import operator
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .resources import read_text as _data
from .stimulus import StimulusKind

LAPSE_MS = 500.0
FALSE_START_MS = 100.0


class IntakeError(ValueError):
    pass


PSQI_TABLE = json.loads(_data("psqi_scoring.json"))
BRUMS_TABLE = {k: v for k, v in json.loads(_data("brums_subscales.json")).items() if not k.startswith("_")}
BRUMS_SUBSCALES = ("anger", "confusion", "depression", "fatigue", "tension", "vigor")
PSQI_COMPONENTS = tuple(PSQI_TABLE["components"])


# ---------------------------------------------------------------- PSQI

@dataclass(frozen=True)
class PsqiResult:
    components: tuple[int, ...]

    def __post_init__(self):
        comps = tuple(int(c) for c in self.components)
        if len(comps) != 7 or any(not 0 <= c <= 3 for c in comps):
            raise IntakeError(f"PSQI needs 7 component scores in 0..3, got {comps}")
        object.__setattr__(self, "components", comps)

    @property
    def global_score(self) -> int:
        return sum(self.components)

    def as_dict(self) -> dict[str, int]:
        d = dict(zip(PSQI_COMPONENTS, self.components))
        d["global"] = self.global_score
        return d


def _bin_upper(value, bins, above):
    for bound, score in bins:
        if value <= bound:
            return score
    return above


def _bin_lower(value, bins, below):
    for bound, score in bins:
        if value >= bound:
            return score
    return below


def _clock_hours(text) -> float:
    m = re.fullmatch(r"\s*(\d{1,2}):(\d{2})\s*", str(text))
    if not m or int(m.group(1)) > 23 or int(m.group(2)) > 59:
        raise IntakeError(f"expected HH:MM clock time, got {text!r}")
    return int(m.group(1)) + int(m.group(2)) / 60.0


def score_psqi(answers: Mapping[str, object]) -> PsqiResult:
    """Seven PSQI components from the 18 rated/numeric answer items (q1..q9, q5a..q5j)."""
    for item in PSQI_TABLE["items"]:
        if item not in answers or answers[item] in (None, ""):
            raise IntakeError(f"PSQI item {item} is missing")
    rated = {}
    for item in PSQI_TABLE["rated_items"]:
        try:
            v = int(str(answers[item]).strip())
        except ValueError:
            raise IntakeError(f"PSQI item {item} must be an integer 0-3, got {answers[item]!r}") from None
        if not 0 <= v <= 3:
            raise IntakeError(f"PSQI item {item} must be in 0..3, got {v}")
        rated[item] = v
    try:
        latency_min = float(answers["q2"])
        hours_asleep = float(answers["q4"])
    except (TypeError, ValueError):
        raise IntakeError("PSQI items q2 (minutes) and q4 (hours) must be numbers") from None
    if latency_min < 0 or hours_asleep < 0:
        raise IntakeError("PSQI items q2 and q4 must be non-negative")
    in_bed = (_clock_hours(answers["q3"]) - _clock_hours(answers["q1"])) % 24.0
    rules = PSQI_TABLE["components"]

    c2 = rules["c2_latency"]
    latency = _bin_upper(latency_min, c2["latency_minutes_bins"], c2["latency_minutes_above"])
    c2_score = _bin_upper(latency + rated[c2["sum_with"]], c2["sum_bins"], c2["sum_above"])

    c3 = rules["c3_duration"]
    c3_score = _bin_lower(hours_asleep, c3["hours_at_least"], c3["below"])

    c4 = rules["c4_efficiency"]
    efficiency = 100.0 * hours_asleep / in_bed if in_bed > 0 else 0.0
    c4_score = _bin_lower(efficiency, c4["percent_at_least"], c4["below"])

    c5 = rules["c5_disturbances"]
    c5_score = _bin_upper(sum(rated[i] for i in c5["items"]), c5["sum_bins"], c5["sum_above"])

    c7 = rules["c7_daytime_dysfunction"]
    c7_score = _bin_upper(sum(rated[i] for i in c7["items"]), c7["sum_bins"], c7["sum_above"])

    return PsqiResult((rated["q6"], c2_score, c3_score, c4_score, c5_score, rated["q7"], c7_score))


# ---------------------------------------------------------------- BRUMS

@dataclass(frozen=True)
class BrumsResult:
    anger: int
    confusion: int
    depression: int
    fatigue: int
    tension: int
    vigor: int

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in BRUMS_SUBSCALES}


def score_brums(items: Sequence[int]) -> BrumsResult:
    """Six subscales, each the sum of four items rated 0-4 (item numbers are 1-based)."""
    items = list(items)
    if len(items) != 24:
        raise IntakeError(f"BRUMS needs 24 items, got {len(items)}")
    values = []
    for i, v in enumerate(items, 1):
        try:
            iv = int(v.strip()) if isinstance(v, str) else int(v)
        except (TypeError, ValueError):
            raise IntakeError(f"BRUMS item {i} is not an integer: {v!r}") from None
        if (not isinstance(v, str) and iv != v) or not 0 <= iv <= 4:
            raise IntakeError(f"BRUMS item {i} must be an integer in 0..4, got {v!r}")
        values.append(iv)
    return BrumsResult(**{name: sum(values[k - 1] for k in BRUMS_TABLE[name]) for name in BRUMS_SUBSCALES})


# ---------------------------------------------------------------- PVT

@dataclass(frozen=True)
class PvtResult:
    mean_rt_ms: float
    lapses: int
    mean_reciprocal: float
    false_starts: int
    n_trials: int

    def as_dict(self):
        return {"mean_rt": self.mean_rt_ms, "lapses": self.lapses,
                "mean_reciprocal": self.mean_reciprocal, "false_starts": self.false_starts}


def score_pvt(trials) -> PvtResult:
    """Trials are reaction times in ms; ``None``/``"FS"`` or anything under 100 ms is a false start.

    Lapses are valid responses slower than 500 ms; mean reciprocal RT is in 1/s.
    """
    trials = list(trials)
    if not trials:
        raise IntakeError("PVT needs at least one trial")
    valid = []
    false_starts = 0
    for t in trials:
        if t is None or (isinstance(t, str) and t.strip().upper() == "FS"):
            false_starts += 1
            continue
        try:
            rt = float(t)
        except (TypeError, ValueError):
            raise IntakeError(f"invalid PVT reaction time {t!r}") from None
        if not np.isfinite(rt) or rt < 0:
            raise IntakeError(f"invalid PVT reaction time {t!r}")
        if rt < FALSE_START_MS:
            false_starts += 1
        else:
            valid.append(rt)
    if not valid:
        raise IntakeError("every PVT trial was a false start")
    rts = np.array(valid)
    return PvtResult(
        mean_rt_ms=float(rts.mean()),
        lapses=int(np.sum(rts > LAPSE_MS)),
        mean_reciprocal=float(np.mean(1000.0 / rts)),
        false_starts=false_starts,
        n_trials=len(trials),
    )


# ---------------------------------------------------------------- profile

@dataclass(frozen=True)
class IntakeProfile:
    psqi: PsqiResult
    brums: BrumsResult
    pvt: PvtResult

    def fields(self) -> dict[str, float]:
        out = {"psqi.global": float(self.psqi.global_score)}
        for i, (name, v) in enumerate(zip(PSQI_COMPONENTS, self.psqi.components), 1):
            out[f"psqi.c{i}"] = float(v)
            out[f"psqi.{name}"] = float(v)
        out.update({f"brums.{k}": float(v) for k, v in self.brums.as_dict().items()})
        out.update({f"pvt.{k}": float(v) for k, v in self.pvt.as_dict().items()})
        return out

    def as_dict(self):
        return {"psqi": self.psqi.as_dict(), "brums": self.brums.as_dict(), "pvt": self.pvt.as_dict()}


def parse_answers(text: str) -> dict[str, str]:
    answers = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IntakeError(f"answers line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in answers:
            raise IntakeError(f"answers line {lineno}: duplicate key {key!r}")
        answers[key] = value
    return answers


def profile_from_answers(answers: Mapping[str, str]) -> IntakeProfile:
    missing = [f"brums_{i}" for i in range(1, 25) if f"brums_{i}" not in answers]
    if missing:
        raise IntakeError(f"BRUMS item {missing[0]} is missing")
    if "pvt" not in answers:
        raise IntakeError("PVT trials (key 'pvt') are missing")
    brums = score_brums([answers[f"brums_{i}"] for i in range(1, 25)])
    trials = [t.strip() for t in str(answers["pvt"]).split(",") if t.strip()]
    return IntakeProfile(score_psqi(answers), brums, score_pvt(trials))


def load_profile(path) -> IntakeProfile:
    return profile_from_answers(parse_answers(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- policy

_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
        "==": operator.eq, "!=": operator.ne}
_COND = re.compile(r"^\s*([A-Za-z0-9_.]+)\s*(<=|>=|==|!=|<|>)\s*(-?\d+(?:\.\d+)?)\s*$")


class PolicyError(ValueError):
    def __init__(self, rule_index: int, message: str):
        super().__init__(f"policy rule {rule_index}: {message}")
        self.rule_index = rule_index


def known_fields() -> frozenset[str]:
    dummy = IntakeProfile(PsqiResult((0,) * 7), BrumsResult(0, 0, 0, 0, 0, 0), PvtResult(300.0, 0, 3.3, 0, 1))
    return frozenset(dummy.fields())


@dataclass(frozen=True)
class Rule:
    conditions: tuple[tuple[str, str, float], ...]
    stimulus: StimulusKind

    def matches(self, fields: Mapping[str, float]) -> bool:
        return all(_OPS[op](fields[name], value) for name, op, value in self.conditions)


@dataclass(frozen=True)
class SelectionPolicy:
    rules: tuple[Rule, ...]
    default: StimulusKind
    source: str = "<inline>"
    digest: str = ""

    @property
    def stamp(self) -> str:
        return f"{self.source} sha256:{self.digest[:16]}"


def parse_policy(text: str, source: str = "<inline>") -> SelectionPolicy:
    """Parse an ordered rule list; ``rule_index`` in errors is the 1-based line number."""
    fields = known_fields()
    rules = []
    default = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        upper = line.upper()
        if upper.startswith("DEFAULT"):
            if default is not None:
                raise PolicyError(lineno, "more than one DEFAULT rule")
            try:
                default = StimulusKind.parse(line[len("DEFAULT"):].strip())
            except ValueError as exc:
                raise PolicyError(lineno, str(exc)) from None
            continue
        m = re.fullmatch(r"IF\s+(.+?)\s+THEN\s+(\S+)", line, flags=re.IGNORECASE)
        if not m:
            raise PolicyError(lineno, f"expected 'IF <cond> [AND <cond>] THEN <stimulus>', got {line!r}")
        conds = []
        for part in re.split(r"\s+AND\s+", m.group(1), flags=re.IGNORECASE):
            cm = _COND.match(part)
            if not cm:
                raise PolicyError(lineno, f"bad condition {part!r}")
            name = cm.group(1).lower()
            if name not in fields:
                raise PolicyError(lineno, f"unknown field {cm.group(1)!r}")
            conds.append((name, cm.group(2), float(cm.group(3))))
        try:
            kind = StimulusKind.parse(m.group(2))
        except ValueError as exc:
            raise PolicyError(lineno, str(exc)) from None
        rules.append(Rule(tuple(conds), kind))
    if default is None:
        raise PolicyError(len(text.splitlines()) + 1, "policy has no DEFAULT rule")
    return SelectionPolicy(tuple(rules), default, source, hashlib.sha256(text.encode()).hexdigest())


def load_policy(path=None) -> SelectionPolicy:
    """Read a policy file, or the bundled placeholder policy when ``path`` is None."""
    if path is None:
        return parse_policy(_data("default_policy.txt"), "builtin:default_policy.txt (placeholder)")
    return parse_policy(Path(path).read_text(encoding="utf-8"), str(path))


def select_stimulus(profile: IntakeProfile, policy: SelectionPolicy) -> StimulusKind:
    """First matching rule wins; otherwise the default."""
    fields = profile.fields()
    for rule in policy.rules:
        if rule.matches(fields):
            return rule.stimulus
    return policy.default
