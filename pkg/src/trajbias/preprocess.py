"""Event streams to fixed-length window feature sequences.

Column layout of a window vector: multi-hot binary codes (primary, secondary,
procedure, medication), then 6 columns per lab code ``[min, max, mean, MAD,
last, count]`` of rank-normalized values, then 2 admin columns (admission
count, fraction of window days in hospital). Empty windows hold 0 in binary and
admin columns and ``EMPTY_CONT`` in lab columns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .artifacts import save_npz, write_json

from .cohort import BINARY_KINDS

EMPTY_CONT = -0.1
LAB_STATS = ("min", "max", "mean", "mad", "last", "count")
ADMIN_FEATURES = ("admission_count", "hospital_day_fraction")
MODES = ("BEE", "S2E", "E2E", "AFE", "ALL")


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class WindowGrid:
    window_days: int = 90
    i_max: int = 22
    anchor_day: Optional[int] = None  # None: anchor on each patient's first event

    def __post_init__(self):
        if self.window_days <= 0 or self.i_max < 1:
            raise PreprocessError("window_days must be > 0 and i_max >= 1")


@dataclass
class FeatureVocabulary:
    binary: dict  # kind -> sorted list of codes
    labs: list
    count_divisor: float = 10.0
    admission_divisor: float = 4.0

    def __post_init__(self):
        self.binary = {k: list(self.binary.get(k, [])) for k in BINARY_KINDS}
        self.labs = list(self.labs)
        self._bin_index = {}
        col = 0
        for kind in BINARY_KINDS:
            codes = self.binary[kind]
            if len(set(codes)) != len(codes):
                raise PreprocessError(f"duplicate codes in kind {kind}")
            for code in codes:
                self._bin_index[(kind, code)] = col
                col += 1
        self.n_binary = col
        self._lab_index = {code: col + 6 * i for i, code in enumerate(self.labs)}
        self.admin_start = col + 6 * len(self.labs)
        self.n_features = self.admin_start + len(ADMIN_FEATURES)

    @property
    def binary_columns(self):
        """Boolean mask of the binary (F_bin) columns; the rest are F_cont."""
        mask = np.zeros(self.n_features, dtype=bool)
        mask[:self.n_binary] = True
        return mask

    @property
    def lab_columns(self):
        mask = np.zeros(self.n_features, dtype=bool)
        mask[self.n_binary:self.admin_start] = True
        return mask

    def binary_index(self, kind, code):
        return self._bin_index.get((kind, code))

    def lab_index(self, code):
        return self._lab_index.get(code)

    def empty_vector(self):
        v = np.zeros(self.n_features)
        v[self.n_binary:self.admin_start] = EMPTY_CONT
        return v

    def feature_names(self):
        names = [f"{k}:{c}" for k in BINARY_KINDS for c in self.binary[k]]
        names += [f"lab:{c}:{s}" for c in self.labs for s in LAB_STATS]
        return names + [f"admin:{a}" for a in ADMIN_FEATURES]

    def to_dict(self):
        return {"binary": self.binary, "labs": self.labs, "count_divisor": self.count_divisor,
                "admission_divisor": self.admission_divisor}

    @classmethod
    def from_dict(cls, d):
        return cls(d["binary"], d["labs"], d.get("count_divisor", 10.0), d.get("admission_divisor", 4.0))


def build_vocabulary(cohort, min_frequency=0.01, count_divisor=10.0, admission_divisor=4.0):
    """Keep codes (per kind) present in at least ``min_frequency`` of patients."""
    if not cohort:
        raise PreprocessError("cannot build a vocabulary from an empty cohort")
    counts = {}
    for rec in cohort:
        for key in {(e.kind, e.code) for e in rec.events}:
            counts[key] = counts.get(key, 0) + 1
    n = len(cohort)
    keep = {key for key, c in counts.items() if c / n >= min_frequency}
    binary = {k: sorted(c for kind, c in keep if kind == k) for k in BINARY_KINDS}
    labs = sorted(c for kind, c in keep if kind == "lab")
    return FeatureVocabulary(binary, labs, count_divisor, admission_divisor)


@dataclass
class RankNormalizer:
    """Per-lab empirical CDF on average ranks, scaled to [0, 1].

    Training value ``v`` maps to ``(avg_rank(v) - 1) / (n - 1)`` (0.5 when
    ``n == 1``); unseen values are linearly interpolated between neighbouring
    training values and clipped to [0, 1].
    """
    values: dict = field(default_factory=dict)   # code -> sorted unique training values
    ranks: dict = field(default_factory=dict)    # code -> normalized average ranks
    flagged: set = field(default_factory=set)    # codes without training values

    def transform(self, code, x):
        x = np.asarray(x, dtype=np.float64)
        if code not in self.values:
            return np.full(x.shape, EMPTY_CONT)
        return np.interp(x, self.values[code], self.ranks[code])

    def to_dict(self):
        return {"values": {k: v.tolist() for k, v in self.values.items()},
                "ranks": {k: v.tolist() for k, v in self.ranks.items()},
                "flagged": sorted(self.flagged)}

    @classmethod
    def from_dict(cls, d):
        return cls({k: np.asarray(v, float) for k, v in d["values"].items()},
                   {k: np.asarray(v, float) for k, v in d["ranks"].items()},
                   set(d.get("flagged", [])))


def normalized_average_ranks(values):
    """Sorted unique values and their normalized average ranks."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)
    uniq, first, counts = np.unique(v, return_index=True, return_counts=True)
    avg_rank = first + (counts + 1) / 2.0  # 1-based average rank of each tie group
    if n == 1:
        return uniq, np.array([0.5])
    return uniq, (avg_rank - 1.0) / (n - 1.0)


def fit_rank_normalizer(cohort, vocab):
    raw = {code: [] for code in vocab.labs}
    for rec in cohort:
        for e in rec.events:
            if e.kind == "lab" and e.code in raw:
                raw[e.code].append(e.value)
    norm = RankNormalizer()
    for code, vals in raw.items():
        if not vals:
            norm.flagged.add(code)
            continue
        norm.values[code], norm.ranks[code] = normalized_average_ranks(vals)
    return norm


def _mad(v):
    return float(np.median(np.abs(v - np.median(v))))


def aggregate_window(events, vocab, normalizer, admissions=(), window=None):
    """Feature vector of one window.

    ``events`` are in record order; ``window`` is ``(first_day, n_days)`` and
    is only needed for the admin columns.
    """
    vec = vocab.empty_vector()
    if not events:
        return vec
    labs = {}
    for order, e in enumerate(events):
        if e.kind == "lab":
            if vocab.lab_index(e.code) is not None:
                labs.setdefault(e.code, []).append((e.day, order, e.value))
        else:
            col = vocab.binary_index(e.kind, e.code)
            if col is not None:
                vec[col] = 1.0
    for code, obs in labs.items():
        start = vocab.lab_index(code)
        vals = normalizer.transform(code, [o[2] for o in obs])
        if code in normalizer.flagged:
            continue
        last = vals[max(range(len(obs)), key=lambda i: (obs[i][0], obs[i][1]))]
        vec[start:start + 6] = [vals.min(), vals.max(), vals.mean(), _mad(vals), last,
                                min(len(vals) / vocab.count_divisor, 1.0)]
    if window is not None and admissions:
        first, n_days = window
        last_day = first + n_days - 1
        overlapping = [a for a in admissions if a.start_day <= last_day and a.end_day >= first]
        covered = set()
        for a in overlapping:
            covered.update(range(max(a.start_day, first), min(a.end_day, last_day) + 1))
        vec[vocab.admin_start] = min(len(overlapping) / vocab.admission_divisor, 1.0)
        vec[vocab.admin_start + 1] = len(covered) / n_days
    return vec


@dataclass
class TrajectoryTensor:
    X: np.ndarray            # (i_max, F)
    presence: np.ndarray     # (i_max,) bool: window holds data
    patient_id: str
    empty: np.ndarray        # (F,) canonical empty window vector
    anchor_day: int = 0
    window_days: int = 90

    @property
    def i_max(self):
        return self.X.shape[0]

    @property
    def length(self):
        return int(self.presence.sum())

    @property
    def n_w(self):
        return self.length / self.i_max


def assemble_sequence(patient, grid, vocab, normalizer):
    if not patient.events:
        raise PreprocessError(f"patient {patient.patient_id} has no events")
    anchor = grid.anchor_day if grid.anchor_day is not None else min(e.day for e in patient.events)
    wd = grid.window_days
    buckets = [[] for _ in range(grid.i_max)]
    for e in patient.events:
        w = (e.day - anchor) // wd
        if 0 <= w < grid.i_max:
            buckets[w].append(e)
    X = np.empty((grid.i_max, vocab.n_features))
    presence = np.zeros(grid.i_max, dtype=bool)
    for w, evs in enumerate(buckets):
        presence[w] = bool(evs)
        X[w] = aggregate_window(evs, vocab, normalizer, patient.admissions, (anchor + w * wd, wd))
    return TrajectoryTensor(X, presence, patient.patient_id, vocab.empty_vector(), anchor, wd)


@dataclass(frozen=True)
class IndexEventCriteria:
    """Inclusion/exclusion rules for a first-episode index event.

    Every exclusion rule looks at events up to the index day unless stated
    otherwise; each can be switched off or given its own code set.
    """
    inclusion_prefixes: tuple
    min_prior_days: int = 90
    short_admission_procedure_rule: bool = True
    short_admission_max_days: int = 2          # stays with end - start < 2 days are under 48 h
    followup_days: int = 30
    followup_procedure_prefixes: tuple = ()
    prior_secondary_rule: bool = True
    prior_secondary_prefixes: tuple = ()
    medication_rule: bool = True
    excluded_medication_prefixes: tuple = ()
    measurement_rule: bool = True
    excluded_measurement_codes: tuple = ()
    threshold_rule: bool = True
    below_threshold_labs: tuple = ()           # ((code, threshold), ...): exclude if value < threshold

    def __post_init__(self):
        if not self.inclusion_prefixes:
            raise PreprocessError("at least one inclusion prefix is required")


HF_PREFIXES = ("I50", "I11.0", "I13.0", "I13.2")

HF_CRITERIA = IndexEventCriteria(
    inclusion_prefixes=HF_PREFIXES,
    followup_procedure_prefixes=("K59", "K60", "K61", "K72", "K73", "K74"),
    prior_secondary_prefixes=HF_PREFIXES,
    excluded_medication_prefixes=("EPLERENONE_25MG", "EPLERENONE_50MG", "SACUBITRIL_VALSARTAN_25MG",
                                  "SACUBITRIL_VALSARTAN_50MG", "SPIRONOLACTONE_25MG", "SPIRONOLACTONE_50MG"),
    excluded_measurement_codes=("NYHA",),
    below_threshold_labs=(("EJECTION_FRACTION", 40.0),),
)

# only inclusion codes are known for stroke
STROKE_CRITERIA = IndexEventCriteria(inclusion_prefixes=("I61", "I63", "I64"))


def criteria_from_dict(d):
    d = dict(d)
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return IndexEventCriteria(**d)


def _matches(code, prefixes):
    return any(code.startswith(p) for p in prefixes)


def select_index_event(patient, criteria):
    """Day of the qualifying index event, or None."""
    candidates = [e for e in patient.events
                  if e.kind == "primary_dx" and _matches(e.code, criteria.inclusion_prefixes)]
    if not candidates:
        return None
    index_day = min(e.day for e in candidates)
    record_start = min(e.day for e in patient.events)
    if index_day - record_start < criteria.min_prior_days:
        return None
    prior = [e for e in patient.events if e.day <= index_day]
    if criteria.short_admission_procedure_rule:
        stay = [a for a in patient.admissions if a.start_day <= index_day <= a.end_day]
        if stay and stay[0].end_day - stay[0].start_day < criteria.short_admission_max_days:
            if any(e.kind == "procedure" and index_day <= e.day <= index_day + criteria.followup_days
                   and _matches(e.code, criteria.followup_procedure_prefixes) for e in patient.events):
                return None
    if criteria.prior_secondary_rule and any(
            e.kind == "secondary_dx" and e.day < index_day and _matches(e.code, criteria.prior_secondary_prefixes)
            for e in prior):
        return None
    if criteria.medication_rule and any(
            e.kind == "medication" and _matches(e.code, criteria.excluded_medication_prefixes) for e in prior):
        return None
    if criteria.measurement_rule and any(
            e.kind == "lab" and e.code in criteria.excluded_measurement_codes for e in prior):
        return None
    if criteria.threshold_rule:
        limits = dict(criteria.below_threshold_labs)
        if any(e.kind == "lab" and e.code in limits and e.value < limits[e.code] for e in prior):
            return None
    return index_day


def align_trajectory(tensor, index_day, mode):
    """Slice windows relative to the index window and left-align them.

    BEE keeps windows before the index window, S2E up to and including it,
    E2E from it onwards and AFE strictly after it. Retained rows are copied
    unchanged to the top; the rest are the empty vector.
    """
    if mode not in MODES:
        raise PreprocessError(f"unknown trajectory mode {mode!r}")
    if mode == "ALL":
        return TrajectoryTensor(tensor.X.copy(), tensor.presence.copy(), tensor.patient_id,
                                tensor.empty, tensor.anchor_day, tensor.window_days)
    if index_day is None:
        raise PreprocessError(f"mode {mode} requires an index event (patient {tensor.patient_id})")
    k = (index_day - tensor.anchor_day) // tensor.window_days
    if not 0 <= k < tensor.i_max:
        raise PreprocessError(f"index event of patient {tensor.patient_id} lies outside the window grid")
    lo, hi = {"BEE": (0, k), "S2E": (0, k + 1), "E2E": (k, tensor.i_max), "AFE": (k + 1, tensor.i_max)}[mode]
    X = np.empty_like(tensor.X)
    presence = np.zeros_like(tensor.presence)
    n = hi - lo
    X[:n] = tensor.X[lo:hi]
    presence[:n] = tensor.presence[lo:hi]
    X[n:] = tensor.empty
    anchor = tensor.anchor_day + lo * tensor.window_days
    return TrajectoryTensor(X, presence, tensor.patient_id, tensor.empty, anchor, tensor.window_days)


@dataclass
class Preprocessor:
    """Fitted vocabulary + normalizer + grid; the complete, serializable transform."""
    vocab: FeatureVocabulary
    normalizer: RankNormalizer
    grid: WindowGrid = field(default_factory=WindowGrid)

    @classmethod
    def fit(cls, cohort, grid=None, min_frequency=0.01, count_divisor=10.0, admission_divisor=4.0):
        vocab = build_vocabulary(cohort, min_frequency, count_divisor, admission_divisor)
        return cls(vocab, fit_rank_normalizer(cohort, vocab), grid or WindowGrid())

    def transform(self, patient):
        return assemble_sequence(patient, self.grid, self.vocab, self.normalizer)

    def to_manifest(self):
        return {"grid": {"window_days": self.grid.window_days, "i_max": self.grid.i_max,
                         "anchor_day": self.grid.anchor_day},
                "vocab": self.vocab.to_dict(), "normalizer": self.normalizer.to_dict(),
                "feature_names": self.vocab.feature_names()}

    @classmethod
    def from_manifest(cls, m):
        return cls(FeatureVocabulary.from_dict(m["vocab"]), RankNormalizer.from_dict(m["normalizer"]),
                   WindowGrid(**m["grid"]))


@dataclass
class TensorBundle:
    """Stacked tensors of a cohort: X (N, i_max, F), presence (N, i_max)."""
    X: np.ndarray
    presence: np.ndarray
    patient_ids: list

    @property
    def n_w(self):
        return self.presence.sum(axis=1) / self.presence.shape[1]

    @property
    def lengths(self):
        return self.presence.sum(axis=1).astype(int)

    def __len__(self):
        return len(self.patient_ids)

    def subset(self, idx):
        idx = np.asarray(idx)
        return TensorBundle(self.X[idx], self.presence[idx], [self.patient_ids[i] for i in idx])

    @classmethod
    def from_tensors(cls, tensors):
        return cls(np.stack([t.X for t in tensors]), np.stack([t.presence for t in tensors]),
                   [t.patient_id for t in tensors])


def save_bundle(path, bundle, manifest, extra=None):
    """Write ``path`` (.npz) plus a sidecar ``<path>.json`` manifest."""
    path = Path(path)
    save_npz(path, X=bundle.X, presence=bundle.presence, patient_ids=np.array(bundle.patient_ids),
             **(extra or {}))
    write_json(path.with_suffix(".json"), manifest)


def load_bundle(path):
    path = Path(path)
    with np.load(path) as f:
        bundle = TensorBundle(f["X"].copy(), f["presence"].copy(), [str(p) for p in f["patient_ids"]])
    manifest = json.loads(path.with_suffix(".json").read_text())
    return bundle, manifest


def preprocess_cohort(cohort, preprocessor, criteria=None, modes=("ALL",)):
    """Wider-cohort ALL bundle plus one aligned sub-cohort bundle per mode.

    Sub-cohorts hold patients with a qualifying index event whose aligned
    trajectory still contains data. Returns ``(wider, {mode: bundle}, index_days)``.
    """
    tensors = [preprocessor.transform(p) for p in cohort]
    wider = TensorBundle.from_tensors(tensors)
    index_days = {}
    if criteria is not None:
        for p in cohort:
            day = select_index_event(p, criteria)
            if day is not None:
                index_days[p.patient_id] = day
    subs = {}
    for mode in modes:
        aligned = []
        for t in tensors:
            if t.patient_id not in index_days:
                continue
            try:
                a = align_trajectory(t, index_days[t.patient_id], mode)
            except PreprocessError:
                continue
            if a.length > 0:
                aligned.append(a)
        if aligned:
            subs[mode] = TensorBundle.from_tensors(aligned)
    return wider, subs, index_days
