"""Desk-scale objectives with stochastic gradient oracles.

Each problem exposes the global objective ``F = mean_i F_i``, per-worker
objectives ``F_i``, and a stochastic oracle whose randomness is keyed on
``(seed, round, worker)`` so any call can be replayed exactly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import DimensionError
from .streams import Stream, generator


class ProblemKind(str, enum.Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    MLP = "mlp"


@dataclass(frozen=True)
class Constants:
    L: float
    V1: float
    V2: float


class Problem:
    kind: ProblemKind
    n: int
    d: int

    @property
    def L(self) -> float:
        raise NotImplementedError

    def local_loss(self, worker: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def local_gradient(self, worker: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(self, worker: int, x: np.ndarray, round: int, seed: int) -> np.ndarray:
        raise NotImplementedError

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.d)

    def loss(self, x: np.ndarray) -> float:
        self._check(x)
        return float(np.mean([self.local_loss(i, x) for i in range(self.n)]))

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return np.mean([self.local_gradient(i, x) for i in range(self.n)], axis=0)

    def constants(self, points=None, draws: int = 64, seed: int = 0) -> Constants:
        """Smoothness constant and Monte-Carlo estimates of V1 and V2.

        ``points`` defaults to a cloud around :meth:`initial_point`.  V1 is the
        largest mean squared gradient deviation seen, V2 = V1 + the largest
        squared mean gradient seen; both are estimates, not bounds.
        """
        if points is None:
            rng = generator(seed, 0, Stream.PROBE)
            x0 = self.initial_point()
            points = [x0 + rng.standard_normal(self.d) / np.sqrt(self.d) for _ in range(4)]
        v1 = v1_mean = 0.0
        for x in points:
            for i in range(self.n):
                mean_grad = self.local_gradient(i, x)
                dev = [
                    np.sum((self.stochastic_gradient(i, x, r, seed) - mean_grad) ** 2)
                    for r in range(1, draws + 1)
                ]
                v1 = max(v1, float(np.mean(dev)))
                v1_mean = max(v1_mean, float(mean_grad @ mean_grad))
        return Constants(self.L, v1, v1 + v1_mean)

    def _check(self, x: np.ndarray) -> None:
        if len(x) != self.d:
            raise DimensionError(f"expected length {self.d}, got {len(x)}")

    def _check_worker(self, worker: int) -> None:
        if not 0 <= worker < self.n:
            raise IndexError(f"worker {worker} out of range for n={self.n}")


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class HeterogeneousQuadratic(Problem):
    """``F_i(x) = 1/2 (x - mu_i)^T A_i (x - mu_i)`` plus Gaussian gradient noise.

    ``A`` may be a dense ``(n, d, d)`` stack, an ``(n, d)`` stack of
    diagonals, or an ``(n, k, b, b)`` stack of ``k`` diagonal blocks with
    ``k * b == d``.
    """

    kind = ProblemKind.QUADRATIC

    def __init__(self, A: np.ndarray, mu: np.ndarray, noise_scale: float = 0.0, L: float | None = None):
        A = np.asarray(A, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        self.n, self.d = mu.shape
        if A.ndim == 2:
            self.structure = "diagonal"
        elif A.ndim == 3:
            self.structure = "dense"
        elif A.ndim == 4 and A.shape[1] * A.shape[2] == self.d:
            self.structure = "block"
        else:
            raise DimensionError(f"A has shape {A.shape}, mu has shape {mu.shape}")
        if A.shape[0] != self.n:
            raise DimensionError(f"A holds {A.shape[0]} workers, mu holds {self.n}")
        self.A, self.mu, self.noise_scale = A, mu, float(noise_scale)
        self._Amu = np.array([self._apply(A[i], mu[i]) for i in range(self.n)])
        self._Abar = A.mean(axis=0)
        self._bbar = self._Amu.mean(axis=0)
        self._cbar = 0.5 * float(np.mean(np.sum(mu * self._Amu, axis=1)))
        self._L = float(L) if L is not None else self._largest_eigenvalue()
        self._x_star = None

    @classmethod
    def generate(
        cls,
        n: int,
        d: int,
        seed: int = 0,
        lambda_min: float = 0.1,
        lambda_max: float = 1.0,
        heterogeneity: float = 1.0,
        noise_scale: float = 0.1,
        rotation_block: int | None = None,
        rotate: bool = True,
    ) -> "HeterogeneousQuadratic":
        """Random instance with spectra in ``[lambda_min, lambda_max]``.

        ``rotation_block=b`` rotates within ``d / b`` independent blocks
        (much cheaper than a full rotation); ``rotate=False`` gives diagonal
        matrices.
        """
        rng = generator(seed, 0, Stream.INIT)
        spectra = rng.uniform(lambda_min, lambda_max, size=(n, d))
        spectra[:, 0] = lambda_max  # pin the top eigenvalue so L is known exactly
        if not rotate:
            A = np.array([rng.permutation(s) for s in spectra])
        elif rotation_block is None or rotation_block >= d:
            A = np.array([_rotated(rng, s) for s in spectra])
        else:
            b = int(rotation_block)
            if d % b:
                raise ValueError(f"rotation_block={b} must divide d={d}")
            A = np.array([[_rotated(rng, blk) for blk in rng.permutation(s).reshape(d // b, b)] for s in spectra])
        mu = heterogeneity * rng.standard_normal((n, d))
        return cls(A, mu, noise_scale, L=lambda_max)

    def _apply(self, A: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.structure == "diagonal":
            return A * v
        if self.structure == "dense":
            return A @ v
        k, b, _ = A.shape
        return np.matmul(A, v.reshape(k, b, 1)).reshape(-1)

    def _largest_eigenvalue(self) -> float:
        if self.structure == "diagonal":
            return float(self.A.max())
        return float(max(np.linalg.eigvalsh(a).max() for a in self.A))

    @property
    def L(self) -> float:
        return self._L

    @property
    def x_star(self) -> np.ndarray:
        if self._x_star is None:
            if self.structure == "diagonal":
                self._x_star = self._bbar / self._Abar
            elif self.structure == "dense":
                self._x_star = np.linalg.solve(self._Abar, self._bbar)
            else:
                k, b, _ = self._Abar.shape
                self._x_star = np.linalg.solve(self._Abar, self._bbar.reshape(k, b, 1)).reshape(-1)
        return self._x_star

    def local_loss(self, worker, x):
        self._check_worker(worker)
        r = x - self.mu[worker]
        return 0.5 * float(r @ self._apply(self.A[worker], r))

    def local_gradient(self, worker, x):
        self._check_worker(worker)
        return self._apply(self.A[worker], x) - self._Amu[worker]

    def loss(self, x):
        self._check(x)
        return 0.5 * float(x @ self._apply(self._Abar, x)) - float(self._bbar @ x) + self._cbar

    def full_gradient(self, x):
        self._check(x)
        return self._apply(self._Abar, x) - self._bbar

    def stochastic_gradient(self, worker, x, round, seed):
        g = self.local_gradient(worker, x)
        if self.noise_scale:
            g = g + self.noise_scale * generator(seed, round, Stream.GRADIENT, worker).standard_normal(self.d)
        return g

    def pooled(self) -> "HeterogeneousQuadratic":
        """Single-worker problem with the same global objective (up to a constant) and noise."""
        return HeterogeneousQuadratic(self._Abar[None], self.x_star[None], self.noise_scale, L=None)


def _rotated(rng: np.random.Generator, spectrum: np.ndarray) -> np.ndarray:
    Q = _random_orthogonal(rng, len(spectrum))
    A = (Q * spectrum) @ Q.T
    return 0.5 * (A + A.T)


class _SampleProblem(Problem):
    """Shared minibatch machinery for problems backed by per-worker datasets."""

    def __init__(self, features: list[np.ndarray], labels: list[np.ndarray], batch: int):
        self.features, self.labels, self.batch = features, labels, int(batch)
        self.n = len(features)

    def _loss_on(self, x, X, y) -> float:
        raise NotImplementedError

    def _grad_on(self, x, X, y) -> np.ndarray:
        raise NotImplementedError

    def local_loss(self, worker, x):
        self._check_worker(worker)
        return self._loss_on(x, self.features[worker], self.labels[worker])

    def local_gradient(self, worker, x):
        self._check_worker(worker)
        return self._grad_on(x, self.features[worker], self.labels[worker])

    def stochastic_gradient(self, worker, x, round, seed):
        self._check_worker(worker)
        X, y = self.features[worker], self.labels[worker]
        idx = generator(seed, round, Stream.MINIBATCH, worker).integers(0, len(y), size=self.batch)
        return self._grad_on(x, X[idx], y[idx])


def _two_cluster_data(rng, n, dim, samples, heterogeneity, separation=1.0):
    center = rng.standard_normal(dim)
    center *= separation / np.linalg.norm(center)
    features, labels = [], []
    for _ in range(n):
        shift = heterogeneity * rng.standard_normal(dim) / np.sqrt(dim)
        y = np.where(rng.random(samples) < 0.5, 1.0, -1.0)
        X = y[:, None] * center + shift + rng.standard_normal((samples, dim))
        features.append(X)
        labels.append(y)
    return features, labels


class SyntheticLogistic(_SampleProblem):
    """Binary logistic regression, labels in {-1, +1}, optional L2 term."""

    kind = ProblemKind.LOGISTIC

    def __init__(self, features, labels, batch: int = 16, l2: float = 0.0):
        super().__init__(features, labels, batch)
        self.d = features[0].shape[1]
        self.l2 = float(l2)
        self._L = max(np.linalg.norm(X, 2) ** 2 / (4 * len(X)) for X in features) + self.l2

    @classmethod
    def generate(cls, n, d, seed=0, samples=200, heterogeneity=1.0, batch=16, l2=0.0):
        rng = generator(seed, 0, Stream.INIT)
        features, labels = _two_cluster_data(rng, n, d, samples, heterogeneity)
        return cls(features, labels, batch, l2)

    @property
    def L(self):
        return self._L

    def _loss_on(self, x, X, y):
        return float(np.mean(np.logaddexp(0.0, -y * (X @ x)))) + 0.5 * self.l2 * float(x @ x)

    def _grad_on(self, x, X, y):
        coef = -y * expit(-y * (X @ x)) / len(y)
        return X.T @ coef + self.l2 * x


class TinyMLP(_SampleProblem):
    """One tanh hidden layer, scalar output, logistic loss.

    Parameters are packed as ``[W1 (hidden x inputs), b1, w2, b2]``.
    """

    kind = ProblemKind.MLP

    def __init__(self, features, labels, hidden: int = 16, batch: int = 16, init_seed: int = 0):
        super().__init__(features, labels, batch)
        self.inputs = features[0].shape[1]
        self.hidden = int(hidden)
        self.d = self.hidden * self.inputs + 2 * self.hidden + 1
        self.init_seed = init_seed
        self._L = None

    @classmethod
    def generate(cls, n, inputs=10, hidden=16, seed=0, samples=200, heterogeneity=1.0, batch=16):
        rng = generator(seed, 0, Stream.INIT)
        features, labels = _two_cluster_data(rng, n, inputs, samples, heterogeneity, separation=2.0)
        return cls(features, labels, hidden, batch, init_seed=seed)

    def unpack(self, x):
        h, p = self.hidden, self.inputs
        W1 = x[: h * p].reshape(h, p)
        b1 = x[h * p : h * p + h]
        w2 = x[h * p + h : h * p + 2 * h]
        return W1, b1, w2, x[-1]

    def initial_point(self):
        rng = generator(self.init_seed, 1, Stream.INIT)
        x = np.zeros(self.d)
        h, p = self.hidden, self.inputs
        x[: h * p] = rng.standard_normal(h * p) / np.sqrt(p)
        x[h * p + h : h * p + 2 * h] = rng.standard_normal(h) / np.sqrt(h)
        return x

    def _forward(self, x, X):
        W1, b1, w2, b2 = self.unpack(x)
        a = np.tanh(X @ W1.T + b1)
        return a, a @ w2 + b2

    def _loss_on(self, x, X, y):
        _, f = self._forward(x, X)
        return float(np.mean(np.logaddexp(0.0, -y * f)))

    def _grad_on(self, x, X, y):
        W1, b1, w2, b2 = self.unpack(x)
        a, f = self._forward(x, X)
        df = -y * expit(-y * f) / len(y)
        dz = np.outer(df, w2) * (1.0 - a * a)
        return np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0), a.T @ df, [df.sum()]])

    @property
    def L(self):
        if self._L is None:
            self._L = self.estimate_smoothness()
        return self._L

    def estimate_smoothness(self, pairs: int = 200, radius: float = 1.0, seed: int = 0, safety: float = 2.0) -> float:
        """Empirical gradient-Lipschitz constant near the initial point.

        Largest ``||grad F_i(x) - grad F_i(y)|| / ||x - y||`` over random pairs,
        times a safety factor.  An estimate, not a certified bound.
        """
        rng = generator(seed, 0, Stream.PROBE)
        x0 = self.initial_point()
        best = 0.0
        for _ in range(pairs):
            x = x0 + radius * rng.standard_normal(self.d) / np.sqrt(self.d)
            y = x0 + radius * rng.standard_normal(self.d) / np.sqrt(self.d)
            for i in range(self.n):
                num = np.linalg.norm(self.local_gradient(i, x) - self.local_gradient(i, y))
                best = max(best, num / np.linalg.norm(x - y))
        return safety * best


def make_problem(kind: str | ProblemKind, n: int, d: int, seed: int = 0, **options) -> Problem:
    kind = ProblemKind(kind)
    if kind is ProblemKind.QUADRATIC:
        return HeterogeneousQuadratic.generate(n, d, seed, **options)
    if kind is ProblemKind.LOGISTIC:
        return SyntheticLogistic.generate(n, d, seed, **options)
    # for the MLP, d is the input width; the parameter count follows from hidden
    return TinyMLP.generate(n, inputs=d, seed=seed, **options)
