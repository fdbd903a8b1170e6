"""Benchmark task generation and dataset serialization.

Four families:
  gmm4d      4-D zero-mean Gaussian prior, 3-component mixture likelihood
             over the state; analytic posterior.
  gmm4d_ood  mixture prior variant of gmm4d, evaluation-only (zero-shot).
  tdoa       2-D range-difference fusion with grid-sampled ground truth.
  gauss1d    1-D Gaussian prior and single-Gaussian likelihood; the desk-scale
             family used by the oracle-backed consistency checks.

Datasets are NDJSON (one task per line) plus a JSON manifest; regeneration
from (family, n, seed) is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_rng
from . import densities
from .densities import DiagGaussian, GaussianMixture, GridSpec, TdoaLikelihood
from .transporter import TransportConfig

__all__ = [
    "Task",
    "Dataset",
    "DatasetManifest",
    "FAMILIES",
    "gen_gauss1d",
    "gen_gmm4d",
    "gen_gmm4d_ood",
    "gen_tdoa",
    "generate",
    "write_dataset",
    "load_tasks",
    "load_manifest",
    "ground_truth_posterior",
    "sample_ground_truth",
    "inference_preset",
]

GENERATOR_VERSION = 1

SENSOR_A = np.array([-3.0, 0.0])
SENSOR_B = np.array([3.0, 0.0])

FAMILIES = ("gmm4d", "gmm4d_ood", "tdoa", "gauss1d")

# (delta_L, n_particles) used at inference time, per experiment family
_INFERENCE_PRESETS = {
    "gmm4d": (0.5, 1500),
    "gmm4d_ood": (0.1, 3000),
    "tdoa": (1.0, 1000),
    "gauss1d": (0.5, 1500),
}

_PARAMETER_RANGES = {
    "gmm4d": {
        "prior_mean": 0.0, "prior_var": [1.0, 10.0], "components": 3,
        "component_mean": [-3.0, 3.0], "component_var": [0.09, 0.49],
    },
    "gmm4d_ood": {
        "prior_components": 3, "prior_center_noise_std": 2.0, "prior_var": [1.0, 5.0],
        "components": 3, "component_mean": [-3.0, 3.0], "component_var": [0.09, 0.49],
    },
    "tdoa": {
        "sensors": [[-3.0, 0.0], [3.0, 0.0]], "target_mean": [4.0, 4.0],
        "target_std": 1.5, "noise_std": [0.4, 0.9],
        "prior_offset_std": [4.0, 5.0], "prior_var_normal": [5.0, 1.0],
    },
    "gauss1d": {
        "prior_mean": 0.0, "prior_var": [1.0, 10.0],
        "component_mean": [-3.0, 3.0], "component_var": [0.09, 0.49],
    },
}


@dataclass
class Task:
    """One inference problem: prior, likelihood, conditioning vector, ground truth."""

    id: str
    family: str
    prior: object
    likelihood: object
    z: np.ndarray
    gt: dict = field(default_factory=lambda: {"kind": "analytic"})

    @property
    def dim(self) -> int:
        return self.prior.dim

    @property
    def n_z(self) -> int:
        return self.z.shape[0]


@dataclass
class DatasetManifest:
    family: str
    counts: dict
    seed: int
    generator_version: int
    parameter_ranges: dict


@dataclass
class Dataset:
    family: str
    splits: dict
    manifest: DatasetManifest


def _split_counts(n: int) -> dict:
    train = max(1, n * 10 // 12)
    val = (n - train) // 2
    test = n - train - val
    return {"train": train, "val": val, "test": test}


def _task_id(family, split, index) -> str:
    return f"{family}-{split}-{index:05d}"


# ---------------------------------------------------------------------------
# family generators
# ---------------------------------------------------------------------------


def _gmm_style_task(family, d, n_comp, split, index, seed):
    rng = derive_rng(seed, family, split, index)
    prior_var = rng.uniform(1.0, 10.0, size=d)
    means = rng.uniform(-3.0, 3.0, size=(n_comp, d))
    comp_var = rng.uniform(0.09, 0.49, size=(n_comp, d))
    prior = DiagGaussian(mean=np.zeros(d), variances=prior_var)
    lik = GaussianMixture(
        weights=np.full(n_comp, 1.0 / n_comp),
        components=tuple(DiagGaussian(mean=m, variances=v) for m, v in zip(means, comp_var)),
    )
    return Task(
        id=_task_id(family, split, index), family=family,
        prior=prior, likelihood=lik, z=means.ravel().copy(),
    )


def _gen_gauss1d_task(split, index, seed):
    return _gmm_style_task("gauss1d", 1, 1, split, index, seed)


def _gen_gmm4d_task(split, index, seed):
    return _gmm_style_task("gmm4d", 4, 3, split, index, seed)


def _gen_gmm4d_ood_task(split, index, seed):
    family = "gmm4d_ood"
    d, n_comp = 4, 3
    rng = derive_rng(seed, family, split, index)
    w = rng.uniform(0.0, 1.0, size=n_comp)
    w = w / w.sum()
    centers = rng.normal(0.0, 2.0, size=(n_comp, d))
    prior_var = rng.uniform(1.0, 5.0, size=(n_comp, d))
    prior = GaussianMixture(
        weights=w,
        components=tuple(DiagGaussian(mean=m, variances=v) for m, v in zip(centers, prior_var)),
    )
    lik_means = rng.uniform(-3.0, 3.0, size=(n_comp, d))
    lik_var = rng.uniform(0.09, 0.49, size=(n_comp, d))
    lik = GaussianMixture(
        weights=np.full(n_comp, 1.0 / n_comp),
        components=tuple(DiagGaussian(mean=m, variances=v) for m, v in zip(lik_means, lik_var)),
    )
    return Task(
        id=_task_id(family, split, index), family=family,
        prior=prior, likelihood=lik, z=lik_means.ravel().copy(),
    )


def _gen_tdoa_task(split, index, seed):
    family = "tdoa"
    rng = derive_rng(seed, family, split, index)
    x_true = rng.normal([4.0, 4.0], 1.5)
    sigma = rng.uniform(0.4, 0.9)
    z = float(densities.range_difference(x_true, SENSOR_A, SENSOR_B) + sigma * rng.normal())
    offset = rng.normal(0.0, [4.0, 5.0])
    prior_mean = x_true + offset
    prior_var = np.empty(2)
    for k in range(2):
        for attempt in range(1000):
            v = rng.normal(5.0, 1.0)
            if v > 0.0:
                prior_var[k] = v
                break
        else:
            raise RuntimeError("prior variance rejection sampling exhausted 1000 attempts")
    prior = DiagGaussian(mean=prior_mean, variances=prior_var)
    lik = TdoaLikelihood(sensor_a=SENSOR_A, sensor_b=SENSOR_B, noise_std=sigma, measurement=z)
    return Task(
        id=_task_id(family, split, index), family=family,
        prior=prior, likelihood=lik, z=np.array([z]),
        gt={"kind": "grid", "cells": 512, "span_sigmas": 6.0},
    )


_TASK_BUILDERS = {
    "gauss1d": _gen_gauss1d_task,
    "gmm4d": _gen_gmm4d_task,
    "gmm4d_ood": _gen_gmm4d_ood_task,
    "tdoa": _gen_tdoa_task,
}


def generate(family: str, n_tasks: int, seed: int) -> Dataset:
    """Generate a dataset with the canonical 10/1/1 train/val/test split."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    builder = _TASK_BUILDERS[family]
    counts = _split_counts(n_tasks)
    splits = {
        split: [builder(split, i, seed) for i in range(count)]
        for split, count in counts.items()
    }
    manifest = DatasetManifest(
        family=family, counts=counts, seed=int(seed),
        generator_version=GENERATOR_VERSION,
        parameter_ranges=_PARAMETER_RANGES[family],
    )
    return Dataset(family=family, splits=splits, manifest=manifest)


def gen_gauss1d(n_tasks, seed) -> Dataset:
    return generate("gauss1d", n_tasks, seed)


def gen_gmm4d(n_tasks, seed) -> Dataset:
    return generate("gmm4d", n_tasks, seed)


def gen_gmm4d_ood(n_tasks, seed) -> Dataset:
    return generate("gmm4d_ood", n_tasks, seed)


def gen_tdoa(n_tasks, seed) -> Dataset:
    return generate("tdoa", n_tasks, seed)


# ---------------------------------------------------------------------------
# ground truth access
# ---------------------------------------------------------------------------


def ground_truth_posterior(task: Task) -> GaussianMixture:
    """Analytic posterior mixture; error for grid-based ground truth."""
    if task.gt.get("kind") != "analytic":
        raise ValueError(f"task {task.id} has no analytic posterior")
    return densities.mixture_product_posterior(task.prior, task.likelihood)


def sample_ground_truth(task: Task, n: int, seed) -> np.ndarray:
    """Ground-truth posterior samples; analytic mixtures or grid sampling."""
    if task.gt.get("kind") == "analytic":
        return densities.sample(ground_truth_posterior(task), n, seed)
    spec = GridSpec(cells=int(task.gt["cells"]), span_sigmas=float(task.gt["span_sigmas"]))
    return densities.grid_posterior_sample(task.prior, task.likelihood, spec, n, seed)


def inference_preset(family: str) -> TransportConfig:
    delta_l, n = _INFERENCE_PRESETS[family]
    return TransportConfig(delta_L=delta_l, n_particles=n)


# ---------------------------------------------------------------------------
# NDJSON serialization
# ---------------------------------------------------------------------------


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a).ravel()]


def _model_to_json(model) -> dict:
    if isinstance(model, DiagGaussian):
        return {"type": "diag_gauss", "mean": _floats(model.mean), "variances": _floats(model.variances)}
    if isinstance(model, GaussianMixture):
        return {
            "type": "gmm",
            "weights": _floats(model.weights),
            "means": [_floats(c.mean) for c in model.components],
            "variances": [_floats(c.variances) for c in model.components],
        }
    if isinstance(model, TdoaLikelihood):
        return {
            "type": "tdoa",
            "sensor_a": _floats(model.sensor_a), "sensor_b": _floats(model.sensor_b),
            "noise_std": float(model.noise_std), "measurement": float(model.measurement),
        }
    raise TypeError(f"cannot serialize {type(model)!r}")


def _model_from_json(obj) -> object:
    kind = obj["type"]
    if kind == "diag_gauss":
        return DiagGaussian(mean=np.array(obj["mean"]), variances=np.array(obj["variances"]))
    if kind == "gmm":
        comps = tuple(
            DiagGaussian(mean=np.array(m), variances=np.array(v))
            for m, v in zip(obj["means"], obj["variances"])
        )
        return GaussianMixture(weights=np.array(obj["weights"]), components=comps)
    if kind == "tdoa":
        return TdoaLikelihood(
            sensor_a=np.array(obj["sensor_a"]), sensor_b=np.array(obj["sensor_b"]),
            noise_std=obj["noise_std"], measurement=obj["measurement"],
        )
    raise ValueError(f"unknown model type {kind!r}")


def task_to_json(task: Task) -> str:
    record = {
        "id": task.id,
        "family": task.family,
        "prior": _model_to_json(task.prior),
        "likelihood": _model_to_json(task.likelihood),
        "z": _floats(task.z),
        "gt": task.gt,
    }
    return json.dumps(record, separators=(",", ":"))


def task_from_json(line: str) -> Task:
    obj = json.loads(line)
    return Task(
        id=obj["id"], family=obj["family"],
        prior=_model_from_json(obj["prior"]),
        likelihood=_model_from_json(obj["likelihood"]),
        z=np.array(obj["z"], dtype=np.float64),
        gt=obj["gt"],
    )


def write_dataset(dataset: Dataset, out_dir, prefix: str | None = None) -> dict:
    """Write split NDJSON files and the manifest; returns the path map."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = prefix or dataset.family
    paths = {}
    for split, tasks in dataset.splits.items():
        p = out / f"{prefix}_{split}.ndjson"
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            for t in tasks:
                fh.write(task_to_json(t))
                fh.write("\n")
        paths[split] = p
    m = dataset.manifest
    manifest_path = out / f"{prefix}_manifest.json"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {
                "family": m.family, "counts": m.counts, "seed": m.seed,
                "generator_version": m.generator_version,
                "parameter_ranges": m.parameter_ranges,
            },
            fh, indent=2,
        )
        fh.write("\n")
    paths["manifest"] = manifest_path
    return paths


def load_tasks(path) -> list:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                tasks.append(task_from_json(line))
    return tasks


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return DatasetManifest(
        family=obj["family"], counts=obj["counts"], seed=obj["seed"],
        generator_version=obj["generator_version"],
        parameter_ranges=obj["parameter_ranges"],
    )
