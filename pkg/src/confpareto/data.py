"""Logged decision data: containers, splitting, CSV I/O and the STAR-style cost outcome."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CalibrationError, DomainError, FormatError, InsufficientDataError, ParseError, SchemaError
from .seeding import STREAM_BETA, STREAM_NOISE, STREAM_SPLIT, rng_for

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Sample:
    decision: int
    rewards: tuple[float, ...]
    covariates: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Logged ``(decision, rewards, covariates)`` triples stored column-wise.

    ``decision_labels[i]`` is the original label of dense decision index ``i``.
    """

    decisions: np.ndarray
    rewards: np.ndarray
    covariates: np.ndarray
    num_decisions: int
    reward_floors: np.ndarray | None = None
    decision_labels: tuple[int, ...] | None = None
    reward_names: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] | None = None
    decision_name: str = "x"

    def __post_init__(self):
        dec = np.asarray(self.decisions)
        rew = np.asarray(self.rewards, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        n = dec.shape[0]
        if rew.ndim == 1:
            rew = rew.reshape(n, -1) if n else rew.reshape(0, 1)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if n else cov.reshape(0, 1)
        if rew.shape[0] != n or cov.shape[0] != n:
            raise SchemaError(f"row counts differ: decisions {n}, rewards {rew.shape[0]}, covariates {cov.shape[0]}")
        m, d = rew.shape[1], cov.shape[1]
        if n and (dec.min() < 0 or dec.max() >= self.num_decisions):
            raise DomainError(f"decision indices must lie in [0, {self.num_decisions})")
        floors = np.full(m, -np.inf) if self.reward_floors is None else np.asarray(self.reward_floors, dtype=float)
        if floors.shape != (m,):
            raise SchemaError(f"reward_floors must have length {m}")
        if n:
            low = rew.min(axis=0)
            bad = np.isfinite(floors) & (floors > low)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise DomainError(f"reward {k} has observations below its floor {floors[k]}")
        labels = tuple(range(self.num_decisions)) if self.decision_labels is None else tuple(self.decision_labels)
        if len(labels) != self.num_decisions:
            raise SchemaError("decision_labels must have one entry per decision")
        rnames = tuple(f"y{k + 1}" for k in range(m)) if self.reward_names is None else tuple(self.reward_names)
        cnames = tuple(f"z{j + 1}" for j in range(d)) if self.covariate_names is None else tuple(self.covariate_names)
        if len(rnames) != m or len(cnames) != d:
            raise SchemaError("column names do not match the reward/covariate dimensions")
        set_ = object.__setattr__
        set_(self, "decisions", _frozen(dec, np.int64))
        set_(self, "rewards", _frozen(rew, float))
        set_(self, "covariates", _frozen(cov, float))
        set_(self, "reward_floors", _frozen(floors, float))
        set_(self, "decision_labels", labels)
        set_(self, "reward_names", rnames)
        set_(self, "covariate_names", cnames)

    @property
    def n(self) -> int:
        return int(self.decisions.shape[0])

    @property
    def m(self) -> int:
        return int(self.rewards.shape[1])

    @property
    def d(self) -> int:
        return int(self.covariates.shape[1])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.decisions[i]), tuple(self.rewards[i].tolist()), tuple(self.covariates[i].tolist()))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(self.n))

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return self.replace(decisions=self.decisions[idx], rewards=self.rewards[idx], covariates=self.covariates[idx])

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            decisions=self.decisions,
            rewards=self.rewards,
            covariates=self.covariates,
            num_decisions=self.num_decisions,
            reward_floors=self.reward_floors,
            decision_labels=self.decision_labels,
            reward_names=self.reward_names,
            covariate_names=self.covariate_names,
            decision_name=self.decision_name,
        )
        fields.update(changes)
        return Dataset(**fields)

    def equals(self, other: "Dataset", rtol: float = 0.0) -> bool:
        if (self.n, self.m, self.d, self.num_decisions) != (other.n, other.m, other.d, other.num_decisions):
            return False
        return (
            np.array_equal(self.decisions, other.decisions)
            and np.allclose(self.rewards, other.rewards, rtol=rtol, atol=0.0)
            and np.allclose(self.covariates, other.covariates, rtol=rtol, atol=0.0)
            and np.array_equal(self.reward_floors, other.reward_floors)
            and self.decision_labels == other.decision_labels
        )


@dataclass(frozen=True, eq=False)
class DataSplit:
    proper_training: Dataset
    calibration: Dataset
    seed: int
    training_indices: np.ndarray = field(repr=False)
    calibration_indices: np.ndarray = field(repr=False)


def split_random(data: Dataset, seed: int) -> DataSplit:
    """Uniformly random half split; the first part gets the extra row when ``n`` is odd."""
    n = data.n
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to split, got {n}")
    perm = rng_for(seed, STREAM_SPLIT).permutation(n)
    n_train = (n + 1) // 2
    train_idx = np.sort(perm[:n_train])
    cal_idx = np.sort(perm[n_train:])
    return DataSplit(
        proper_training=data.subset(train_idx),
        calibration=data.subset(cal_idx),
        seed=seed,
        training_indices=_frozen(train_idx, np.int64),
        calibration_indices=_frozen(cal_idx, np.int64),
    )


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    decision: str
    rewards: tuple[str, ...]
    covariates: tuple[str, ...]
    reward_floors: tuple[float, ...] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        floors = d.get("reward_floors")
        return cls(
            decision=d["decision"],
            rewards=tuple(d["rewards"]),
            covariates=tuple(d["covariates"]),
            reward_floors=None if floors is None else tuple(float(f) for f in floors),
        )

    def to_dict(self) -> dict:
        return {
            "decision": self.decision,
            "rewards": list(self.rewards),
            "covariates": list(self.covariates),
            "reward_floors": None if self.reward_floors is None else [_float_token(f) for f in self.reward_floors],
        }


def _float_token(v: float):
    # JSON has no infinities; keep them as strings
    return v if math.isfinite(v) else ("-inf" if v < 0 else "inf")


def _parse_float(token: str, row: int, column: str) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ParseError(f"row {row}, column {column!r}: cannot parse {token!r} as a number") from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}, column {column!r}: non-finite value {token!r}")
    return v


def _parse_int(token: str, row: int, column: str) -> int:
    try:
        return int(token)
    except ValueError:
        pass
    v = _parse_float(token, row, column)
    if v != int(v):
        raise ParseError(f"row {row}, column {column!r}: decision {token!r} is not an integer")
    return int(v)


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Read a dataset; rows with a missing reward are dropped, decisions are re-indexed densely.

    Row numbers in error messages count the header as row 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file, no header row") from None
        cols = {name: j for j, name in enumerate(header)}
        for name in (schema.decision, *schema.rewards, *schema.covariates):
            if name not in cols:
                raise SchemaError(f"{path}: missing column {name!r}")
        jd = cols[schema.decision]
        jr = [cols[c] for c in schema.rewards]
        jz = [cols[c] for c in schema.covariates]
        raw_dec, rew, cov = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: row {rowno} has {len(row)} fields, header has {len(header)}")
            ys = [row[j].strip() for j in jr]
            if any(y.lower() in MISSING_TOKENS for y in ys):
                continue
            raw_dec.append(_parse_int(row[jd].strip(), rowno, schema.decision))
            rew.append([_parse_float(y, rowno, c) for y, c in zip(ys, schema.rewards)])
            cov.append([_parse_float(row[j].strip(), rowno, c) for j, c in zip(jz, schema.covariates)])

    labels = sorted(set(raw_dec))
    index = {lab: i for i, lab in enumerate(labels)}
    m, d = len(schema.rewards), len(schema.covariates)
    return Dataset(
        decisions=np.array([index[v] for v in raw_dec], dtype=np.int64),
        rewards=np.array(rew, dtype=float).reshape(-1, m),
        covariates=np.array(cov, dtype=float).reshape(-1, d),
        num_decisions=len(labels),
        reward_floors=schema.reward_floors,
        decision_labels=tuple(labels),
        reward_names=schema.rewards,
        covariate_names=schema.covariates,
        decision_name=schema.decision,
    )


def schema_of(data: Dataset) -> CsvSchema:
    return CsvSchema(
        decision=data.decision_name,
        rewards=data.reward_names,
        covariates=data.covariate_names,
        reward_floors=tuple(data.reward_floors.tolist()),
    )


def export_csv(data: Dataset, path: str | Path, columns=None) -> None:
    """Write ``data`` with original decision labels; floats use shortest round-trip repr.

    ``columns`` optionally fixes the column order; it must name every column exactly once.
    """
    default = [data.decision_name, *data.reward_names, *data.covariate_names]
    columns = default if columns is None else list(columns)
    if sorted(columns) != sorted(default):
        raise SchemaError(f"column order {columns} does not match dataset columns {default}")
    where = {name: j for j, name in enumerate(default)}
    pick = [where[c] for c in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for i in range(data.n):
            row = (
                [data.decision_labels[data.decisions[i]]]
                + [repr(float(v)) for v in data.rewards[i]]
                + [repr(float(v)) for v in data.covariates[i]]
            )
            w.writerow([row[j] for j in pick])


# ---------------------------------------------------------------------------
# STAR-style synthetic cost outcome


@dataclass(frozen=True)
class StarCostConfig:
    mu: float = 10.0
    sigma: float = 1.0
    beta_support: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4)
    beta_probs: tuple[float, ...] = (0.4, 0.15, 0.15, 0.15, 0.15)
    omega0: float | None = None
    omega2: float | None = None
    att_targets: tuple[float, float] = (4.0, 2.0)
    seed: int = 0
    minmax_scale: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if len(self.beta_support) != len(self.beta_probs):
            raise DomainError("beta_support and beta_probs differ in length")
        if abs(math.fsum(self.beta_probs) - 1.0) > 1e-12 or min(self.beta_probs) < 0:
            raise DomainError("beta_probs must be a probability vector")


@dataclass(frozen=True)
class StarCostParams:
    beta: np.ndarray
    omega0: float
    omega2: float
    z_min: np.ndarray
    z_span: np.ndarray


def minmax_scale(z: np.ndarray, z_min=None, z_span=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    if z_min is None:
        z_min = z.min(axis=0) if len(z) else np.zeros(z.shape[1])
        z_span = (z.max(axis=0) - z_min) if len(z) else np.ones(z.shape[1])
        z_span = np.where(z_span > 0, z_span, 1.0)
    return (z - z_min) / z_span, z_min, z_span


def draw_beta(d: int, cfg: StarCostConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng_for(cfg.seed, STREAM_BETA) if rng is None else rng
    return rng.choice(np.asarray(cfg.beta_support, dtype=float), size=d, p=np.asarray(cfg.beta_probs))


def star_mean_outcome(z: np.ndarray, decisions: np.ndarray, beta: np.ndarray, omega0: float, omega2: float, mu: float) -> np.ndarray:
    """Noise-free mean of the (negative) cost ``y2`` given scaled covariates and decisions."""
    decisions = np.asarray(decisions)
    if decisions.size and (decisions.min() < 0 or decisions.max() > 2):
        raise DomainError("cost synthesis is defined for decisions 0, 1, 2 only")
    lin = z @ beta
    out = np.empty(len(decisions))
    out[decisions == 0] = -(lin[decisions == 0] - omega0 + mu)
    out[decisions == 1] = -(np.exp((z[decisions == 1] + 0.5) @ beta) + mu)
    out[decisions == 2] = -(lin[decisions == 2] - omega2 + mu)
    return out


def _scaled(data: Dataset, cfg: StarCostConfig):
    if cfg.minmax_scale:
        return minmax_scale(data.covariates)
    d = data.d
    return data.covariates, np.zeros(d), np.ones(d)


def calibrate_omega(data: Dataset, cfg: StarCostConfig, beta: np.ndarray | None = None) -> tuple[float, float]:
    """Solve for ``(omega0, omega2)`` hitting the treated-group contrasts in ``cfg.att_targets``.

    The contrast for group ``g`` in {0, 2} is the mean over units observed under ``g`` of
    (mean y2 under g) - (mean y2 under decision 1); it is affine in omega_g with unit slope.
    """
    if data.n and (data.decisions.min() < 0 or data.decisions.max() > 2):
        raise DomainError("cost synthesis is defined for decisions 0, 1, 2 only")
    z, _, _ = _scaled(data, cfg)
    beta = draw_beta(data.d, cfg) if beta is None else np.asarray(beta, dtype=float)
    omegas = []
    for g, target in zip((0, 2), cfg.att_targets):
        mask = data.decisions == g
        if not mask.any():
            raise CalibrationError(f"no units observed under decision {g}")
        zg = z[mask]
        # contrast(omega) = mean(omega - z'b + exp((z+0.5)'b))
        gap = np.mean(np.exp((zg + 0.5) @ beta) - zg @ beta)
        omegas.append(float(target - gap))
    return omegas[0], omegas[1]


def treated_contrast(z: np.ndarray, decisions: np.ndarray, params: StarCostParams, mu: float, group: int) -> float:
    """Noise-free treated-group contrast of ``group`` against decision 1 on scaled covariates."""
    zg = z[np.asarray(decisions) == group]
    own = star_mean_outcome(zg, np.full(len(zg), group), params.beta, params.omega0, params.omega2, mu)
    ref = star_mean_outcome(zg, np.ones(len(zg), dtype=int), params.beta, params.omega0, params.omega2, mu)
    return float(np.mean(own - ref))


def star_cost_parameters(data: Dataset, cfg: StarCostConfig) -> StarCostParams:
    """Draw beta from ``cfg.seed`` and calibrate omega unless both are fixed in ``cfg``."""
    _, z_min, z_span = _scaled(data, cfg)
    beta = draw_beta(data.d, cfg)
    if cfg.omega0 is None or cfg.omega2 is None:
        w0, w2 = calibrate_omega(data, cfg, beta)
        w0 = w0 if cfg.omega0 is None else cfg.omega0
        w2 = w2 if cfg.omega2 is None else cfg.omega2
    else:
        w0, w2 = cfg.omega0, cfg.omega2
    return StarCostParams(beta=_frozen(beta, float), omega0=float(w0), omega2=float(w2),
                          z_min=_frozen(z_min, float), z_span=_frozen(z_span, float))


def star_synthesize_costs(
    data: Dataset,
    cfg: StarCostConfig,
    params: StarCostParams | None = None,
    name: str = "y2",
) -> Dataset:
    """Append a synthetic negative-cost reward drawn per decision from the three Gaussian cost laws.

    One beta vector is drawn per run and reused for every row.  Covariates are min-max
    scaled for the computation only; the returned dataset keeps the input covariates.
    """
    if data.n and (data.decisions.min() < 0 or data.decisions.max() > 2):
        raise DomainError("cost synthesis is defined for decisions 0, 1, 2 only")
    params = star_cost_parameters(data, cfg) if params is None else params
    if cfg.minmax_scale:
        z, _, _ = minmax_scale(data.covariates, params.z_min, params.z_span)
    else:
        z = data.covariates
    mean = star_mean_outcome(z, data.decisions, params.beta, params.omega0, params.omega2, cfg.mu)
    y2 = mean + cfg.sigma * rng_for(cfg.seed, STREAM_NOISE).standard_normal(data.n)
    return data.replace(
        rewards=np.column_stack([data.rewards, y2]),
        reward_floors=np.append(data.reward_floors, -np.inf),
        reward_names=(*data.reward_names, name),
    )

