"""Synthetic longitudinal EHR cohorts with known latent phenotypes.

Each patient record spans ``i_max`` windows of ``window_days`` days. A patient's
trajectory length ``L`` (number of windows holding any event) is drawn from a
configurable distribution, optionally shifted per phenotype by ``rho``.
Window 0 is always active and carries an event on day 0, so a grid anchored on
the first event reproduces the generator's windows exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

BINARY_KINDS = ("primary_dx", "secondary_dx", "procedure", "medication")
KINDS = BINARY_KINDS + ("lab",)


class ConfigError(ValueError):
    """Invalid configuration."""


@dataclass(frozen=True)
class ClinicalEvent:
    day: int
    kind: str
    code: str
    value: Optional[float] = None

    def __post_init__(self):
        if self.day < 0:
            raise ValueError(f"negative event day {self.day}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.code:
            raise ValueError("empty event code")
        if (self.value is not None) != (self.kind == "lab"):
            raise ValueError("value must be present iff kind == 'lab'")

    def to_dict(self):
        d = {"day": self.day, "kind": self.kind, "code": self.code}
        if self.value is not None:
            d["value"] = self.value
        return d


@dataclass(frozen=True)
class AdmissionSpan:
    start_day: int
    end_day: int

    def __post_init__(self):
        if self.start_day > self.end_day:
            raise ValueError("admission start after end")


@dataclass
class PatientRecord:
    patient_id: str
    events: list
    admissions: list = field(default_factory=list)
    true_phenotype: Optional[int] = None

    def to_dict(self):
        return {
            "patient_id": self.patient_id,
            "events": [e.to_dict() for e in self.events],
            "admissions": [asdict(a) for a in self.admissions],
            "true_phenotype": self.true_phenotype,
        }

    @classmethod
    def from_dict(cls, d):
        events = [ClinicalEvent(int(e["day"]), e["kind"], e["code"], e.get("value")) for e in d["events"]]
        admissions = [AdmissionSpan(int(a["start_day"]), int(a["end_day"])) for a in d.get("admissions", [])]
        return cls(d["patient_id"], events, admissions, d.get("true_phenotype"))


@dataclass(frozen=True)
class BinaryCodeSpec:
    kind: str
    code: str
    rates: tuple  # Bernoulli rate per active window, one per phenotype


@dataclass(frozen=True)
class LabSpec:
    code: str
    means: tuple
    sds: tuple
    presence: float = 0.5  # probability the lab is measured in an active window
    max_count: int = 3
    value_range: tuple = (-np.inf, np.inf)


@dataclass
class CohortConfig:
    n_patients: int
    n_phenotypes: int
    binary_codes: list
    labs: list
    length_distribution: dict = field(default_factory=lambda: {"kind": "uniform", "low": 1, "high": 22})
    length_phenotype_correlation: float = 0.0
    index_event_codes: tuple = ("I50", "I11.0", "I13.0", "I13.2")
    index_event_fraction: float = 0.0
    admission_rate: float = 0.3
    i_max: int = 22
    window_days: int = 90
    seed: int = 0

    def validate(self):
        if self.n_patients < 1 or self.n_phenotypes < 1:
            raise ConfigError("n_patients and n_phenotypes must be positive")
        if not 0.0 <= self.length_phenotype_correlation <= 1.0:
            raise ConfigError("length_phenotype_correlation must lie in [0, 1]")
        if not 0.0 <= self.index_event_fraction <= 1.0:
            raise ConfigError("index_event_fraction must lie in [0, 1]")
        if not 0.0 <= self.admission_rate <= 1.0:
            raise ConfigError("admission_rate must lie in [0, 1]")
        if self.i_max < 1 or self.window_days < 1:
            raise ConfigError("i_max and window_days must be positive")
        for spec in self.binary_codes:
            if spec.kind not in BINARY_KINDS:
                raise ConfigError(f"binary code {spec.code!r} has non-binary kind {spec.kind!r}")
            if len(spec.rates) != self.n_phenotypes:
                raise ConfigError(f"code {spec.code!r}: expected {self.n_phenotypes} rates")
            if any(not 0.0 <= r <= 1.0 for r in spec.rates):
                raise ConfigError(f"code {spec.code!r}: rates must lie in [0, 1]")
        for lab in self.labs:
            if len(lab.means) != self.n_phenotypes or len(lab.sds) != self.n_phenotypes:
                raise ConfigError(f"lab {lab.code!r}: expected {self.n_phenotypes} means and sds")
            if any(sd <= 0 for sd in lab.sds):
                raise ConfigError(f"lab {lab.code!r}: sd must be > 0")
            if not 0.0 <= lab.presence <= 1.0 or lab.max_count < 1:
                raise ConfigError(f"lab {lab.code!r}: invalid presence/max_count")
        _length_support(self.length_distribution, self.i_max)

    def to_dict(self):
        d = asdict(self)
        d["index_event_codes"] = list(self.index_event_codes)
        for lab in d["labs"]:
            lab["value_range"] = [float(v) for v in lab["value_range"]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["binary_codes"] = [BinaryCodeSpec(c["kind"], c["code"], tuple(c["rates"])) for c in d["binary_codes"]]
        d["labs"] = [LabSpec(l["code"], tuple(l["means"]), tuple(l["sds"]), l.get("presence", 0.5),
                             l.get("max_count", 3), tuple(l.get("value_range", (-np.inf, np.inf))))
                     for l in d["labs"]]
        if "index_event_codes" in d:
            d["index_event_codes"] = tuple(d["index_event_codes"])
        return cls(**d)


def default_cohort_config(n_patients=2000, n_phenotypes=4, n_binary=60, n_labs=6, *,
                          rho=0.0, i_max=22, seed=0, base_rate=0.04, signature_rate=0.45,
                          signature_size=None, lab_shift=1.5, index_event_fraction=0.5,
                          length_distribution=None):
    """Benchmark cohort: each phenotype owns a block of high-rate signature codes.

    Binary codes are spread round-robin over the four binary kinds. Phenotype
    ``c`` raises codes ``c*s .. c*s+s-1`` to ``signature_rate`` and shifts every
    lab mean by ``lab_shift`` standard deviations times a phenotype-specific sign.
    """
    if signature_size is None:
        signature_size = max(1, n_binary // (2 * n_phenotypes))
    rng = np.random.default_rng(derive_seed(seed, "default-config"))
    codes = []
    for j in range(n_binary):
        kind = BINARY_KINDS[j % len(BINARY_KINDS)]
        rates = []
        for c in range(n_phenotypes):
            own = c * signature_size <= j < (c + 1) * signature_size
            rates.append(signature_rate if own else base_rate)
        codes.append(BinaryCodeSpec(kind, f"{kind[:3].upper()}{j:03d}", tuple(rates)))
    signs = rng.choice([-1.0, 1.0], size=(n_labs, n_phenotypes))
    labs = []
    for j in range(n_labs):
        centre = 50.0 + 10.0 * j
        means = tuple(float(centre + lab_shift * 5.0 * signs[j, c] * (1 + c % 2)) for c in range(n_phenotypes))
        labs.append(LabSpec(f"LAB{j:02d}", means, (5.0,) * n_phenotypes, presence=0.5, max_count=3,
                            value_range=(0.0, 200.0)))
    return CohortConfig(
        n_patients=n_patients, n_phenotypes=n_phenotypes, binary_codes=codes, labs=labs,
        length_distribution=length_distribution or {"kind": "uniform", "low": 1, "high": i_max},
        length_phenotype_correlation=rho, index_event_fraction=index_event_fraction,
        i_max=i_max, seed=seed,
    )


def derive_seed(seed, label):
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def patient_rng(seed, patient_id, stream="events"):
    """Per-patient generator, independent of generation order."""
    return np.random.default_rng(derive_seed(seed, f"{stream}:{patient_id}"))


def _length_support(dist, i_max):
    kind = dist.get("kind")
    if kind == "uniform":
        low, high = int(dist["low"]), int(dist["high"])
        if not 1 <= low <= high <= i_max:
            raise ConfigError(f"uniform length bounds must satisfy 1 <= low <= high <= i_max, got {low}, {high}")
        return low, high
    if kind == "fixed":
        v = int(dist["value"])
        if not 1 <= v <= i_max:
            raise ConfigError("fixed length must lie in [1, i_max]")
        return v, v
    if kind == "categorical":
        probs = np.asarray(dist["probs"], dtype=float)
        if len(probs) != i_max or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ConfigError("categorical length probs must have i_max non-negative entries summing to 1")
        return 1, i_max
    raise ConfigError(f"unknown length distribution kind {kind!r}")


def sample_length(config, phenotype, rng):
    dist = config.length_distribution
    low, high = _length_support(dist, config.i_max)
    if dist["kind"] == "categorical":
        base = int(rng.choice(np.arange(1, config.i_max + 1), p=np.asarray(dist["probs"], float)))
    else:
        base = int(rng.integers(low, high + 1))
    rho = config.length_phenotype_correlation
    if rho == 0.0 or config.n_phenotypes == 1:
        return base
    # phenotype offsets span the support symmetrically: -half .. +half
    half = (high - low) / 2.0
    offset = (phenotype / (config.n_phenotypes - 1) * 2.0 - 1.0) * half
    return int(np.clip(round(base + rho * offset), max(1, low), high))


def generate_patient(config, patient_id):
    rng = patient_rng(config.seed, patient_id)
    C = config.n_phenotypes
    phenotype = int(rng.integers(C))
    L = sample_length(config, phenotype, rng)
    active = np.sort(np.concatenate([[0], rng.choice(np.arange(1, config.i_max), size=L - 1, replace=False)])
                     ) if L > 1 else np.array([0])
    wd = config.window_days
    events, admissions = [], []
    for w in active:
        start = int(w) * wd
        window_events = []
        for spec in config.binary_codes:
            if rng.random() < spec.rates[phenotype]:
                window_events.append(ClinicalEvent(start + int(rng.integers(wd)), spec.kind, spec.code))
        for lab in config.labs:
            if rng.random() < lab.presence:
                for _ in range(int(rng.integers(1, lab.max_count + 1))):
                    window_events.append(_lab_event(lab, phenotype, start + int(rng.integers(wd)), rng))
        if not window_events:
            # every active window must carry data; a lab draw keeps binary rates unbiased
            if config.labs:
                lab = config.labs[int(rng.integers(len(config.labs)))]
                window_events.append(_lab_event(lab, phenotype, start + int(rng.integers(wd)), rng))
            else:
                spec = config.binary_codes[int(rng.integers(len(config.binary_codes)))]
                window_events.append(ClinicalEvent(start + int(rng.integers(wd)), spec.kind, spec.code))
        if rng.random() < config.admission_rate:
            a0 = start + int(rng.integers(wd))
            admissions.append(AdmissionSpan(a0, min(a0 + int(rng.integers(0, 10)), start + wd - 1)))
        events.extend(window_events)
    # pin the earliest event of window 0 to day 0 so the first-event anchor matches the grid
    first = min(range(len(events)), key=lambda i: (events[i].day, i))
    e = events[first]
    events[first] = ClinicalEvent(0, e.kind, e.code, e.value)
    events.sort(key=lambda ev: ev.day)
    return PatientRecord(patient_id, events, admissions, phenotype)


def _lab_event(lab, phenotype, day, rng):
    lo, hi = lab.value_range
    v = float(np.clip(rng.normal(lab.means[phenotype], lab.sds[phenotype]), lo, hi))
    return ClinicalEvent(day, "lab", lab.code, v)


def patient_ids(n):
    width = max(5, len(str(n - 1)))
    return [f"P{i:0{width}d}" for i in range(n)]


def generate_cohort(config, ids=None):
    """Generate ``config.n_patients`` records (or the records for ``ids``)."""
    config.validate()
    ids = patient_ids(config.n_patients) if ids is None else list(ids)
    return [generate_patient(config, pid) for pid in ids]


def inject_index_events(cohort, config, fraction=None, min_offset_days=90):
    """Give a seeded fraction of patients one primary-diagnosis index event.

    The event lands at a day ``>= min_offset_days`` inside an already active
    window when one exists (so trajectory length is unchanged); otherwise the
    first window after the offset is used.
    """
    fraction = config.index_event_fraction if fraction is None else fraction
    codes = list(config.index_event_codes)
    if not codes:
        raise ConfigError("index_event_codes must be non-empty")
    if fraction == 0:
        return list(cohort)
    wd = config.window_days
    out = []
    for rec in cohort:
        rng = patient_rng(config.seed, rec.patient_id, stream="index")
        if rng.random() >= fraction:
            out.append(rec)
            continue
        first_window = -(-min_offset_days // wd)
        active = sorted({e.day // wd for e in rec.events if e.day // wd >= first_window})
        w = int(rng.choice(active)) if active else first_window
        day = max(w * wd + int(rng.integers(wd)), min_offset_days)
        code = codes[int(rng.integers(len(codes)))]
        events = sorted(rec.events + [ClinicalEvent(day, "primary_dx", code)], key=lambda ev: ev.day)
        out.append(PatientRecord(rec.patient_id, events, list(rec.admissions), rec.true_phenotype))
    return out


def write_jsonl(cohort, path, header=None):
    """One record per line; an optional ``{"_header": {...}}`` first line carries metadata."""
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"_header": header}, sort_keys=True) + "\n")
        for rec in cohort:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path, with_header=False):
    header, records = None, []
    with open(Path(path)) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "_header" in obj:
                header = obj["_header"]
            else:
                records.append(PatientRecord.from_dict(obj))
    return (records, header) if with_header else records


def trajectory_length(record, window_days=90):
    """Number of distinct generator windows holding at least one event."""
    return len({e.day // window_days for e in record.events})
