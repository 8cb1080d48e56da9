from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from loguru import logger

from schemas import DivergenceError, EnsembleSpec, InputError, MlpSpec
from snapshots import EnsembleFile, MemberWeights, load_snapshot, save_snapshot


@dataclass(eq=False)
class Mlp:
    """tanh hidden layers, softmax output; weights[l] has shape (fan_in, fan_out)"""

    weights: list[NDArray[np.float64]]
    biases: list[NDArray[np.float64]]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass(eq=False)
class Ensemble:
    spec: EnsembleSpec
    members: list[Mlp]


def init_mlp(layer_sizes: list[int], seed: int) -> Mlp:
    """weights uniform in +-1/sqrt(fan_in), zero biases"""
    if len(layer_sizes) < 3 or any(n < 1 for n in layer_sizes):
        raise InputError("init_mlp", f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def _softmax(z: NDArray[np.float64]) -> NDArray[np.float64]:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model: Mlp, X: NDArray[np.float64]) -> tuple[list[NDArray[np.float64]], NDArray[np.float64]]:
    acts = [X]
    a = X
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W + b
        if l == last:
            return acts, _softmax(z)
        a = np.tanh(z)
        acts.append(a)
    raise AssertionError("unreachable")


def _backward(
    model: Mlp, acts: list[NDArray[np.float64]], dz: NDArray[np.float64]
) -> tuple[list[NDArray[np.float64]], list[NDArray[np.float64]]]:
    """dz is the gradient w.r.t. the output logits"""
    n = len(model.weights)
    gW: list[NDArray[np.float64]] = [np.empty(0)] * n
    gb: list[NDArray[np.float64]] = [np.empty(0)] * n
    for l in range(n - 1, -1, -1):
        gW[l] = acts[l].T @ dz
        gb[l] = dz.sum(axis=0)
        if l > 0:
            dz = (dz @ model.weights[l].T) * (1.0 - acts[l] ** 2)
    return gW, gb


def _as_batch(model: Mlp, x) -> NDArray[np.float64]:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.layer_sizes[0]:
        raise InputError(
            "mlp_forward", f"input has shape {X.shape}, expected (*, {model.layer_sizes[0]})"
        )
    return X


def mlp_forward(model: Mlp, x) -> NDArray[np.float64]:
    """class probabilities; a 1-d input gives a 1-d result"""
    X = _as_batch(model, x)
    probs = _forward(model, X)[1]
    return probs[0] if np.ndim(x) == 1 else probs


def _onehot(y: NDArray[np.int64], n_classes: int) -> NDArray[np.float64]:
    Y = np.zeros((len(y), n_classes))
    Y[np.arange(len(y)), y] = 1.0
    return Y


def ncl_loss_and_grads(
    model: Mlp,
    X: NDArray[np.float64],
    Y: NDArray[np.float64],
    others: NDArray[np.float64] | None = None,
    n_members: int = 1,
    ncl_lambda: float = 0.0,
) -> tuple[float, float, list[NDArray[np.float64]], list[NDArray[np.float64]]]:
    """
    Batch-mean cross entropy plus the negative correlation penalty
    p = (f - fbar) . sum_{j != i} (f_j - fbar) = -||f - fbar||^2.

    `others` is the sum of the other members' probabilities for the same batch;
    fbar depends on this member's output and is differentiated exactly.
    Returns (cross_entropy, penalty, weight_grads, bias_grads).
    """
    B = len(X)
    acts, f = _forward(model, X)
    ce = float(-np.sum(Y * np.log(np.clip(f, 1e-300, None))) / B)
    dz = (f - Y) / B

    penalty = 0.0
    if ncl_lambda != 0.0 and others is not None and n_members > 1:
        fbar = (f + others) / n_members
        dev = f - fbar
        penalty = float(-np.sum(dev * dev) / B)
        g = ncl_lambda * (-2.0 * (n_members - 1) / n_members) * dev / B
        dz = dz + f * (g - np.sum(g * f, axis=1, keepdims=True))

    gW, gb = _backward(model, acts, dz)
    return ce, penalty, gW, gb


def _check_data(model: Mlp, X, y) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    X = _as_batch(model, X)
    y = np.asarray(y, dtype=np.int64)
    n_classes = model.layer_sizes[-1]
    if y.shape != (len(X),):
        raise InputError("mlp_train", f"{len(y)} labels for {len(X)} samples")
    if len(y) and (y.min() < 0 or y.max() >= n_classes):
        raise InputError("mlp_train", f"labels must lie in [0, {n_classes})")
    return X, y


def _apply(model: Mlp, gW, gb, lr: float) -> None:
    if lr == 0.0:
        return
    for l in range(len(model.weights)):
        model.weights[l] -= lr * gW[l]
        model.biases[l] -= lr * gb[l]


def _epoch_lr(spec: MlpSpec, epoch: int) -> float:
    return spec.learning_rate / (1.0 + spec.lr_decay * epoch)


def _diverged(where: str, epoch: int, spec: MlpSpec) -> DivergenceError:
    return DivergenceError(
        where,
        f"loss became non-finite at epoch {epoch} with learning_rate={spec.learning_rate}; "
        "lower the learning rate or increase lr_decay",
    )


def mlp_train(
    model: Mlp, X, y, spec: MlpSpec, curve: list[dict[str, Any]] | None = None, member: int = 0
) -> Mlp:
    """mini-batch gradient descent on cross entropy; batch order is seeded by spec.seed"""
    X, y = _check_data(model, X, y)
    Y = _onehot(y, model.layer_sizes[-1])
    rng = np.random.default_rng(spec.seed)
    for epoch in range(spec.epochs):
        lr = _epoch_lr(spec, epoch)
        perm = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), spec.batch_size):
            idx = perm[start : start + spec.batch_size]
            ce, _, gW, gb = ncl_loss_and_grads(model, X[idx], Y[idx])
            if not np.isfinite(ce):
                raise _diverged("mlp_train", epoch, spec)
            total += ce * len(idx)
            _apply(model, gW, gb, lr)
        if curve is not None:
            curve.append(_curve_row(model, X, y, member, epoch, total / max(len(X), 1)))
    return model


def _curve_row(model: Mlp, X, y, member: int, epoch: int, loss: float) -> dict[str, Any]:
    acc = float(np.mean(np.argmax(mlp_forward(model, X), axis=1) == y)) if len(X) else 0.0
    return {"member": member, "epoch": epoch, "loss": loss, "accuracy": acc}


def build_ensemble(spec: EnsembleSpec, input_dim: int | None = None) -> Ensemble:
    """member i is initialised from seed member.seed + i"""
    sizes = list(spec.member.layer_sizes)
    if input_dim is not None:
        sizes[0] = input_dim
    if sizes[0] < 1:
        raise InputError("build_ensemble", "input size unknown; pass input_dim")
    members = [init_mlp(sizes, spec.member.seed + i) for i in range(spec.n_members)]
    return Ensemble(spec=spec, members=members)


def ncl_train(
    ensemble: Ensemble,
    X,
    y,
    spec: EnsembleSpec | None = None,
    jobs: int = 1,
    curve: list[dict[str, Any]] | None = None,
) -> Ensemble:
    """
    lambda == 0 (or a single member) trains members as independent jobs;
    otherwise members advance in lockstep, all gradients of a batch are taken
    before any member is updated.
    """
    spec = spec or ensemble.spec
    lam = spec.ncl_lambda
    M = len(ensemble.members)
    if not 0.0 <= lam <= 1.0:
        logger.warning(f"ncl_lambda={lam} is outside [0, 1]; training anyway")
    logger.info(f"Training ensemble of {M} members, lambda={lam}, on {len(X)} samples")

    if lam == 0.0 or M == 1:
        curves: list[list[dict[str, Any]]] = [[] for _ in range(M)]

        def _train(i: int) -> Mlp:
            return mlp_train(ensemble.members[i], X, y, spec.member, curves[i], member=i)

        if jobs > 1 and M > 1:
            with ThreadPoolExecutor(max_workers=min(jobs, M)) as pool:
                list(pool.map(_train, range(M)))
        else:
            for i in range(M):
                _train(i)
        if curve is not None:
            for rows in curves:
                curve.extend(rows)
        return ensemble

    member_spec = spec.member
    X, y = _check_data(ensemble.members[0], X, y)
    Y = _onehot(y, ensemble.members[0].layer_sizes[-1])
    rng = np.random.default_rng(member_spec.seed)
    for epoch in range(member_spec.epochs):
        lr = _epoch_lr(member_spec, epoch)
        perm = rng.permutation(len(X))
        totals = np.zeros(M)
        for start in range(0, len(X), member_spec.batch_size):
            idx = perm[start : start + member_spec.batch_size]
            Xb, Yb = X[idx], Y[idx]
            outputs = [_forward(m, Xb)[1] for m in ensemble.members]
            updates = []
            for i, m in enumerate(ensemble.members):
                others = sum(outputs[j] for j in range(M) if j != i)
                ce, pen, gW, gb = ncl_loss_and_grads(m, Xb, Yb, others, M, lam)
                if not np.isfinite(ce + pen):
                    raise _diverged("ncl_train", epoch, member_spec)
                totals[i] += (ce + lam * pen) * len(idx)
                updates.append((gW, gb))
            for m, (gW, gb) in zip(ensemble.members, updates):
                _apply(m, gW, gb, lr)
        if curve is not None:
            for i, m in enumerate(ensemble.members):
                curve.append(_curve_row(m, X, y, i, epoch, totals[i] / max(len(X), 1)))
        logger.debug(f"NCL epoch {epoch + 1}/{member_spec.epochs} loss={totals.mean() / max(len(X), 1):.5f}")
    return ensemble


def ensemble_proba(ensemble: Ensemble, X) -> NDArray[np.float64]:
    return np.mean([mlp_forward(m, X) for m in ensemble.members], axis=0)


def ensemble_predict(ensemble: Ensemble, x) -> int | NDArray[np.int64]:
    """argmax of the mean member probabilities, lowest class on ties"""
    probs = ensemble_proba(ensemble, x)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return np.argmax(probs, axis=1)


def pairwise_correlation(ensemble: Ensemble, X, y) -> float:
    """mean Pearson correlation between members' output errors over all pairs"""
    M = len(ensemble.members)
    if M < 2:
        return 1.0
    Y = _onehot(np.asarray(y, dtype=np.int64), ensemble.members[0].layer_sizes[-1])
    errors = [(mlp_forward(m, X) - Y).ravel() for m in ensemble.members]
    corr = np.corrcoef(np.stack(errors))
    return float(corr[np.triu_indices(M, k=1)].mean())


def save_ensemble(
    ensemble: Ensemble, path: Path, config_hash: str | None = None, seed: int | None = None
) -> Path:
    doc = EnsembleFile(
        config_hash=config_hash,
        seed=seed,
        spec=ensemble.spec,
        layer_sizes=ensemble.members[0].layer_sizes,
        members=[
            MemberWeights(
                weights=[w.tolist() for w in m.weights], biases=[b.tolist() for b in m.biases]
            )
            for m in ensemble.members
        ],
    )
    return save_snapshot(doc, path)


def load_ensemble(path: Path) -> Ensemble:
    doc: EnsembleFile = load_snapshot(path, kind="ensemble")  # type: ignore[assignment]
    members = [
        Mlp(
            [np.asarray(w, dtype=np.float64) for w in m.weights],
            [np.asarray(b, dtype=np.float64) for b in m.biases],
        )
        for m in doc.members
    ]
    return Ensemble(spec=doc.spec, members=members)
