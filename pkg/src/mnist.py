from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable
import gzip
import json
import struct
import time

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from loguru import logger

from classifier import build_ensemble, ensemble_predict, load_ensemble, ncl_train, save_ensemble
from hierarchy import build_hierarchy, featurize_images, feature_length, make_scan_plan, train_hierarchy
from reports import IO_ERRORS, read_features, write_csv, write_features
from schemas import (
    ConfigError,
    DataError,
    IdxConsistencyError,
    IdxFormatError,
    IdxLengthError,
    MissingStageError,
    RunConfig,
)
from snapshots import load_hierarchy, save_hierarchy
from utils import config_hash, derive_seed, file_md5, write_json

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
SPLIT_SIZES = {"train": 60000, "test": 10000}
# md5 of the published .gz archives
GZ_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
DOWNLOAD_HELP = (
    "MNIST files are not downloaded automatically. Place train-images-idx3-ubyte, "
    "train-labels-idx1-ubyte, t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte "
    "(raw or .gz) from http://yann.lecun.com/exdb/mnist/ in the data directory, "
    "then pass --data-dir or set DESTIN_DATA_DIR."
)

STAGES = ["hierarchy", "featurize", "classify", "report"]


@dataclass
class IdxDataset:
    images: NDArray[np.uint8]
    labels: NDArray[np.uint8]

    def __len__(self) -> int:
        return len(self.labels)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path: Path, magic: int, ndim: int) -> NDArray[np.uint8]:
    """
    big-endian u32 magic, ndim big-endian u32 sizes, then row-major unsigned bytes
    """
    data = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(data) < 4:
        raise IdxLengthError("load_idx", f"{path.name}: file is {len(data)} bytes, too short for a magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(
            "load_idx", f"{path.name}: bad magic number 0x{found:08X}, expected 0x{magic:08X}"
        )
    if len(data) < header:
        raise IdxLengthError("load_idx", f"{path.name}: truncated header ({len(data)} bytes)")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    expected = int(np.prod(dims))
    payload = len(data) - header
    if payload != expected:
        raise IdxLengthError(
            "load_idx", f"{path.name}: {payload} payload bytes, header {dims} requires {expected}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: Path, labels_path: Path) -> IdxDataset:
    images = _parse_idx(Path(images_path), IMAGES_MAGIC, 3)
    labels = _parse_idx(Path(labels_path), LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxConsistencyError(
            "load_idx", f"{len(images)} images but {len(labels)} labels"
        )
    if len(labels) and labels.max() > 9:
        raise IdxConsistencyError("load_idx", f"label {int(labels.max())} outside 0..9")
    logger.info(f"Loaded {len(labels)} images of shape {images.shape[1:]} from {Path(images_path).name}")
    return IdxDataset(images=images, labels=labels)


def _find(data_dir: Path, name: str) -> Path | None:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    return None


def split_paths(data_dir: Path, split: str) -> tuple[Path, Path]:
    found = [_find(Path(data_dir), name) for name in SPLITS[split]]
    missing = [name for name, path in zip(SPLITS[split], found) if path is None]
    if missing:
        raise DataError("data", f"missing {', '.join(missing)} in {data_dir}. {DOWNLOAD_HELP}")
    return found[0], found[1]  # type: ignore[return-value]


def load_split(data_dir: Path, split: str) -> IdxDataset:
    return load_idx(*split_paths(data_dir, split))


def verify_data(data_dir: Path) -> list[dict[str, Any]]:
    """structural check of each split plus md5 of .gz archives where present"""
    rows = []
    for split in SPLITS:
        try:
            images_path, labels_path = split_paths(data_dir, split)
            ds = load_idx(images_path, labels_path)
            status = "ok" if len(ds) == SPLIT_SIZES[split] else f"unexpected count {len(ds)}"
        except DataError as e:
            rows.append({"split": split, "file": "-", "status": str(e), "checksum": "-"})
            continue
        for path in (images_path, labels_path):
            checksum = "not checked"
            if path.name in GZ_MD5:
                checksum = "match" if file_md5(path) == GZ_MD5[path.name] else "MISMATCH"
            rows.append({"split": split, "file": path.name, "status": status, "checksum": checksum})
    return rows


def _normalize(images: NDArray[np.uint8]) -> NDArray[np.float64]:
    return images.astype(np.float64) / 255.0


def _subset(n_available: int, n: int, seed: int, field: str) -> NDArray[np.int64]:
    """first n indices after a seeded shuffle"""
    if n > n_available:
        raise ConfigError(field, f"requested {n} images but only {n_available} are available")
    return np.random.default_rng(seed).permutation(n_available)[:n]


class Pipeline:
    """
    Staged MNIST run inside `out_dir`. Each stage writes its artifacts; stages
    whose artifacts exist for the same config hash are skipped when resuming.
    """

    def __init__(
        self,
        cfg: RunConfig,
        data_dir: Path | None,
        out_dir: Path,
        jobs: int = 1,
        command: str = "",
    ):
        self.cfg = cfg
        self.command = command
        self.data_dir = Path(data_dir) if data_dir else None
        self.out_dir = Path(out_dir)
        self.jobs = jobs
        self.config_hash = config_hash(cfg.hashed_dump())
        ext = cfg.pipeline.feature_format
        self.artifacts: dict[str, list[Path]] = {
            "hierarchy": [self.out_dir / "hierarchy.json"],
            "featurize": [
                self.out_dir / f"features_train.{ext}",
                self.out_dir / f"features_test.{ext}",
            ],
            "classify": [self.out_dir / "ensemble.json", self.out_dir / "training_curve.csv"],
            "report": [self.out_dir / "report.json"],
        }
        self.seeds = {
            "hierarchy_subset": derive_seed(cfg.seed, "hierarchy-subset"),
            "hierarchy_init": derive_seed(cfg.seed, "hierarchy-init"),
            "hierarchy_order": derive_seed(cfg.seed, "hierarchy-order"),
            "classifier_subset": derive_seed(cfg.seed, "classifier-subset"),
            "test_subset": derive_seed(cfg.seed, "test-subset"),
            "classifier": derive_seed(cfg.seed, "classifier", cfg.classifier.member.seed),
        }
        self.meta_path = self.out_dir / "run_meta.json"
        self.plan = make_scan_plan(
            (28, 28),
            tuple(cfg.scan.window),
            cfg.scan.stride,
            cfg.scan.sample_interval,
            cfg.scan.order,
        )

    def done(self, stage: str) -> bool:
        return all(p.exists() for p in self.artifacts[stage])

    def _meta(self) -> dict[str, Any]:
        if self.meta_path.exists():
            return json.loads(self.meta_path.read_text(encoding="utf-8"))
        return {}

    def _record(self, stage: str, seconds: float) -> None:
        meta = self._meta()
        meta.update(
            {"config_hash": self.config_hash, "seed": self.cfg.seed, "command": self.command}
        )
        meta.setdefault("stage_timings", {})[stage] = round(seconds, 3)
        write_json(self.meta_path, meta)

    def _require(self, stage: str) -> None:
        idx = STAGES.index(stage)
        for before in STAGES[:idx]:
            if not self.done(before):
                missing = [p.name for p in self.artifacts[before] if not p.exists()]
                raise MissingStageError(
                    stage,
                    f"prerequisite stage '{before}' has not produced {', '.join(missing)}; "
                    f"run with --stage {before} first",
                )

    def _data_dir(self) -> Path:
        if self.data_dir is None:
            raise DataError("data", f"no data directory given. {DOWNLOAD_HELP}")
        return self.data_dir

    def run(self, stage: str | None = None, force: bool = False) -> dict[str, Any] | None:
        meta = self._meta()
        if meta and meta.get("config_hash") != self.config_hash and not force:
            raise ConfigError(
                "out_dir",
                f"{self.out_dir} holds a run with config hash {meta.get('config_hash')}; "
                "use another directory or --force",
            )
        if stage is not None:
            if stage not in STAGES:
                raise ConfigError("--stage", f"unknown stage '{stage}', choose from {STAGES}")
            self._require(stage)
            if self.done(stage) and not force:
                raise ConfigError(
                    stage, f"artifacts of stage '{stage}' already exist; pass --force to overwrite"
                )
            return self._run_stage(stage)

        if all(self.done(s) for s in STAGES) and not force:
            raise ConfigError(
                "out_dir",
                f"{self.out_dir} already holds a completed run with this config; pass --force",
            )
        report = None
        for name in STAGES:
            if self.done(name) and not force:
                logger.info(f"Stage '{name}' already complete, resuming after it")
                continue
            report = self._run_stage(name)
        return report or json.loads(self.artifacts["report"][0].read_text(encoding="utf-8"))

    def _run_stage(self, stage: str) -> dict[str, Any] | None:
        handlers: dict[str, Callable[[], dict[str, Any] | None]] = {
            "hierarchy": self.stage_hierarchy,
            "featurize": self.stage_featurize,
            "classify": self.stage_classify,
            "report": self.stage_report,
        }
        logger.info(f"Running stage '{stage}'")
        started = time.perf_counter()
        try:
            result = handlers[stage]()
        except IO_ERRORS as e:
            logger.exception(f"Stage '{stage}' failed")
            raise DataError(stage, f"stage failed: {e}") from e
        except Exception:
            logger.error(f"Stage '{stage}' failed")
            raise
        self._record(stage, time.perf_counter() - started)
        return result

    def stage_hierarchy(self) -> None:
        cfg = self.cfg
        train = load_split(self._data_dir(), "train")
        idx = _subset(
            len(train), cfg.pipeline.n_hierarchy_train, self.seeds["hierarchy_subset"],
            "pipeline.n_hierarchy_train",
        )
        h = build_hierarchy(
            cfg.hierarchy.layers, cfg.node, cfg.hierarchy.patch, seed=self.seeds["hierarchy_init"]
        )
        train_hierarchy(
            h, _normalize(train.images[idx]), self.plan, cfg.pipeline.passes,
            seed=self.seeds["hierarchy_order"],
        )
        h.set_train_mode(False)
        h.reset()
        save_hierarchy(h, self.artifacts["hierarchy"][0], self.config_hash, self.cfg.seed)

    def stage_featurize(self) -> None:
        cfg = self.cfg
        h = load_hierarchy(self.artifacts["hierarchy"][0])
        logger.info(f"Feature vectors have {feature_length(h, self.plan)} values")
        data_dir = self._data_dir()
        subsets = [
            ("train", cfg.pipeline.n_classifier_train, "classifier_subset", "pipeline.n_classifier_train"),
            ("test", cfg.pipeline.n_test, "test_subset", "pipeline.n_test"),
        ]
        for (split, n, seed_key, field), path in zip(subsets, self.artifacts["featurize"]):
            ds = load_split(data_dir, split)
            idx = _subset(len(ds), n, self.seeds[seed_key], field)
            features = featurize_images(h, _normalize(ds.images[idx]), self.plan, self.jobs)
            write_features(
                path, ds.labels[idx], features, cfg.pipeline.feature_format,
                metadata={"config_hash": self.config_hash, "seed": cfg.seed},
            )

    def stage_classify(self) -> None:
        cfg = self.cfg
        labels, features = read_features(self.artifacts["featurize"][0])
        if len(labels) == 0:
            raise ConfigError("pipeline.n_classifier_train", "no training features to classify")
        member = cfg.classifier.member.model_copy(update={"seed": self.seeds["classifier"]})
        spec = cfg.classifier.model_copy(update={"member": member})
        ensemble = build_ensemble(spec, input_dim=features.shape[1])
        curve: list[dict[str, Any]] = []
        ncl_train(ensemble, features, labels, spec, jobs=self.jobs, curve=curve)
        save_ensemble(ensemble, self.artifacts["classify"][0], self.config_hash, self.cfg.seed)
        write_csv(
            pd.DataFrame(curve, columns=["member", "epoch", "loss", "accuracy"]),
            self.artifacts["classify"][1],
        )

    def stage_report(self) -> dict[str, Any]:
        labels, features = read_features(self.artifacts["featurize"][1])
        ensemble = load_ensemble(self.artifacts["classify"][0])
        n_classes = ensemble.members[0].layer_sizes[-1]
        confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        accuracy = 0.0
        if len(labels):
            pred = np.asarray(ensemble_predict(ensemble, features))
            np.add.at(confusion, (labels, pred), 1)
            accuracy = float(np.mean(pred == labels))
        totals = confusion.sum(axis=1)
        per_class = [
            float(confusion[c, c] / totals[c]) if totals[c] else None for c in range(n_classes)
        ]
        report = {
            "config_hash": self.config_hash,
            "seed": self.cfg.seed,
            "seeds": self.seeds,
            "accuracy": accuracy,
            "confusion_matrix": confusion.tolist(),
            "per_class_accuracy": per_class,
            "n_train": int(self.cfg.pipeline.n_classifier_train),
            "n_test": int(len(labels)),
            "feature_length": int(features.shape[1]) if features.ndim == 2 else 0,
        }
        write_json(self.artifacts["report"][0], report)
        logger.info(f"Test accuracy {accuracy:.4f} on {len(labels)} images")
        return report


def run_pipeline(
    cfg: RunConfig,
    data_dir: Path | None,
    out_dir: Path,
    stage: str | None = None,
    force: bool = False,
    jobs: int = 1,
    command: str = "",
) -> dict[str, Any] | None:
    return Pipeline(cfg, data_dir, out_dir, jobs, command).run(stage=stage, force=force)


def featurize_dataset(h, dataset: IdxDataset, plan, out_path: Path, fmt: str = "csv", jobs: int = 1) -> Path:
    """frozen-hierarchy features for every image of `dataset`, label column first"""
    features = featurize_images(h, _normalize(dataset.images), plan, jobs)
    return write_features(out_path, dataset.labels, features, fmt)
