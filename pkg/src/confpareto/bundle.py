"""Fitted-pipeline bundles: split, per-reward quantile models, policy model and alpha spec."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conformal import AlphaSpec, BoundResult, bounds_batch, compute_residuals
from .data import Dataset, DataSplit
from .errors import SchemaError
from .pareto import FrontierReport, frontier_report
from .policy import PolicyModel
from .quantile import QuantileModel, model_from_dict, model_to_dict

SCHEMA_VERSION = 1


def _floats(a) -> list:
    return [v if math.isfinite(v) else ("inf" if v > 0 else "-inf") for v in np.asarray(a, dtype=float).tolist()]


def _unfloats(a) -> np.ndarray:
    return np.array([float(v) for v in a], dtype=float)


@dataclass(frozen=True, eq=False)
class ModelBundle:
    models: tuple[QuantileModel, ...]
    policy: PolicyModel
    alpha: AlphaSpec
    calibration: Dataset
    training_indices: np.ndarray
    calibration_indices: np.ndarray
    split_seed: int
    config: dict

    @property
    def num_decisions(self) -> int:
        return self.calibration.num_decisions

    def residuals(self) -> list[np.ndarray]:
        cached = self.__dict__.get("_residuals")
        if cached is None:
            cached = [compute_residuals(mod, self.calibration, k) for k, mod in enumerate(self.models)]
            object.__setattr__(self, "_residuals", cached)
        return cached

    def bounds_at(self, z) -> list[BoundResult]:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.shape != (self.calibration.d,):
            raise SchemaError(f"context has {z.size} values, bundle expects {self.calibration.d}")
        out = []
        for x in range(self.num_decisions):
            res = bounds_batch(
                self.models, self.calibration, self.policy, x, z[None, :], self.alpha,
                self.calibration.reward_floors, self.residuals(),
            )
            out.append(
                BoundResult(
                    decision=x,
                    bound_vector=tuple(float(v) for v in res["bounds"][0]),
                    kappas=tuple(float(v) for v in res["kappas"][0]),
                    quantile_predictions=tuple(float(v) for v in res["qhat"][0]),
                    clamped=tuple(bool(v) for v in res["clamped"][0]),
                )
            )
        return out

    def frontier(self, z) -> FrontierReport:
        return frontier_report(self.bounds_at(z), z=z, alpha=self.alpha.total,
                               decision_labels=self.calibration.decision_labels)

    def to_dict(self) -> dict:
        cal = self.calibration
        return {
            "format": "confpareto.bundle",
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "alpha": self.alpha.to_dict(),
            "dataset": {
                "num_decisions": cal.num_decisions,
                "decision_labels": list(cal.decision_labels),
                "decision_name": cal.decision_name,
                "reward_names": list(cal.reward_names),
                "covariate_names": list(cal.covariate_names),
                "reward_floors": _floats(cal.reward_floors),
            },
            "split": {
                "seed": self.split_seed,
                "training_indices": self.training_indices.tolist(),
                "calibration_indices": self.calibration_indices.tolist(),
            },
            "calibration": {
                "decisions": cal.decisions.tolist(),
                "rewards": cal.rewards.tolist(),
                "covariates": cal.covariates.tolist(),
            },
            "models": [model_to_dict(mod) for mod in self.models],
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ModelBundle":
        if blob.get("format") != "confpareto.bundle":
            raise SchemaError("not a model bundle")
        if blob.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported bundle version {blob.get('schema_version')}")
        ds, cal = blob["dataset"], blob["calibration"]
        m, d = len(ds["reward_names"]), len(ds["covariate_names"])
        calibration = Dataset(
            decisions=np.asarray(cal["decisions"], dtype=np.int64),
            rewards=np.asarray(cal["rewards"], dtype=float).reshape(-1, m),
            covariates=np.asarray(cal["covariates"], dtype=float).reshape(-1, d),
            num_decisions=ds["num_decisions"],
            reward_floors=_unfloats(ds["reward_floors"]),
            decision_labels=tuple(ds["decision_labels"]),
            reward_names=tuple(ds["reward_names"]),
            covariate_names=tuple(ds["covariate_names"]),
            decision_name=ds["decision_name"],
        )
        models = tuple(model_from_dict(mb, ds["num_decisions"], d) for mb in blob["models"])
        if len(models) != m:
            raise SchemaError(f"bundle has {len(models)} models for {m} rewards")
        policy = PolicyModel.from_dict(blob["policy"])
        if (policy.num_decisions, policy.d) != (ds["num_decisions"], d):
            raise SchemaError("policy dimensions do not match the dataset")
        split = blob["split"]
        return cls(
            models=models,
            policy=policy,
            alpha=AlphaSpec.from_dict(blob["alpha"]),
            calibration=calibration,
            training_indices=np.asarray(split["training_indices"], dtype=np.int64),
            calibration_indices=np.asarray(split["calibration_indices"], dtype=np.int64),
            split_seed=int(split["seed"]),
            config=blob.get("config", {}),
        )

    def save(self, path: str | Path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_bundle(split: DataSplit, models, policy: PolicyModel, alpha: AlphaSpec, config: dict) -> ModelBundle:
    return ModelBundle(
        models=tuple(models),
        policy=policy,
        alpha=alpha,
        calibration=split.calibration,
        training_indices=np.asarray(split.training_indices),
        calibration_indices=np.asarray(split.calibration_indices),
        split_seed=split.seed,
        config=config,
    )


def write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")
