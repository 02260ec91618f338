"""Small models with closed-form Hessians.

They expose the same interface as :class:`ifrx.receiver.ToyRx`
(``n_params``, ``loss``, ``per_sample_loss``, ``grad``, ``per_sample_grads``,
``hvp``) so the Arnoldi, influence and fine-tuning code can be checked against
dense linear algebra. Batches are :class:`ArrayData` rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ArrayData:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    def subset(self, idx) -> "ArrayData":
        idx = np.atleast_1d(np.asarray(idx))
        return ArrayData(self.X[idx], self.y[idx])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class QuadraticModel:
    """Per-sample loss ``0.5 (theta - x)^T A (theta - x) + y``-free quadratic.

    Every sample shares the curvature ``A`` and differs in its centre ``x``, so
    the mean Hessian is exactly ``A`` and the minimizer is the mean centre. A
    row with ``y == 1`` is a linear loss ``x^T theta`` instead (zero curvature),
    which keeps first-order predictions exact for test points.
    """

    def __init__(self, A: np.ndarray):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        self.A = 0.5 * (A + A.T)
        self.n_params = A.shape[0]

    def per_sample_loss(self, loss_id, params, batch: ArrayData) -> np.ndarray:
        d = params - batch.X
        quad = 0.5 * np.einsum("ni,ij,nj->n", d, self.A, d)
        lin = batch.X @ params
        return np.where(batch.y == 1, lin, quad)

    def loss(self, loss_id, params, batch) -> float:
        return float(self.per_sample_loss(loss_id, params, batch).mean())

    def per_sample_grads(self, loss_id, params, batch) -> np.ndarray:
        quad = (params - batch.X) @ self.A
        return np.where((batch.y == 1)[:, None], batch.X, quad)

    def grad(self, loss_id, params, batch) -> np.ndarray:
        return self.per_sample_grads(loss_id, params, batch).mean(axis=0)

    def hessian(self, loss_id, params, batch) -> np.ndarray:
        return self.A * float(np.mean(batch.y != 1))

    def hvp(self, loss_id, params, batch, v) -> np.ndarray:
        return self.hessian(loss_id, params, batch) @ v


class LogisticModel:
    """L2-regularized logistic regression, labels in {0, 1}.

    ``bce`` is the log-loss; ``smooth-ber`` is ``sigmoid(-kappa * m)`` with
    margin ``m = (2y - 1) x^T theta``. Both carry the ridge term so the mean
    Hessian is positive definite.
    """

    def __init__(self, n_features: int, l2: float = 1e-2, kappa: float = 2.0):
        self.n_params = n_features
        self.l2 = l2
        self.kappa = kappa

    def _margin(self, params, batch):
        s = 2.0 * batch.y - 1.0
        return s, s * (batch.X @ params)

    def _derivs(self, loss_id, m):
        """Loss value and its first two derivatives w.r.t. the margin."""
        if loss_id == "bce":
            return np.logaddexp(0.0, -m), -_sigmoid(-m), _sigmoid(m) * _sigmoid(-m)
        if loss_id == "smooth-ber":
            k = self.kappa
            p = _sigmoid(-k * m)
            return p, -k * p * (1 - p), k * k * p * (1 - p) * (1 - 2 * p)
        raise ValueError(f"unknown loss {loss_id!r}")

    def per_sample_loss(self, loss_id, params, batch) -> np.ndarray:
        _, m = self._margin(params, batch)
        return self._derivs(loss_id, m)[0] + 0.5 * self.l2 * params @ params

    def loss(self, loss_id, params, batch) -> float:
        return float(self.per_sample_loss(loss_id, params, batch).mean())

    def per_sample_grads(self, loss_id, params, batch) -> np.ndarray:
        s, m = self._margin(params, batch)
        d1 = self._derivs(loss_id, m)[1]
        return (d1 * s)[:, None] * batch.X + self.l2 * params

    def grad(self, loss_id, params, batch) -> np.ndarray:
        return self.per_sample_grads(loss_id, params, batch).mean(axis=0)

    def hessian(self, loss_id, params, batch) -> np.ndarray:
        _, m = self._margin(params, batch)
        d2 = self._derivs(loss_id, m)[2]
        return (batch.X.T * d2) @ batch.X / len(batch) + self.l2 * np.eye(self.n_params)

    def hvp(self, loss_id, params, batch, v) -> np.ndarray:
        _, m = self._margin(params, batch)
        d2 = self._derivs(loss_id, m)[2]
        return batch.X.T @ (d2 * (batch.X @ v)) / len(batch) + self.l2 * v

    def fit(self, data: ArrayData, params=None, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
        """Newton's method on the mean training log-loss."""
        theta = np.zeros(self.n_params) if params is None else np.array(params, dtype=np.float64)
        for _ in range(max_iter):
            g = self.grad("bce", theta, data)
            step = np.linalg.solve(self.hessian("bce", theta, data), g)
            theta -= step
            if np.linalg.norm(step) < tol:
                break
        return theta


class LeastSquaresModel:
    """Ridge least squares in sum form: ``F = 0.5 sum_i (a_i^T theta - y_i)^2 + 0.5 ridge ||theta||^2``.

    With a sum-form objective, adding one sample is an exact rank-one update of
    the Hessian, so the optimum shift has a Sherman-Morrison closed form.
    """

    def __init__(self, n_features: int, ridge: float = 1.0):
        self.n_params = n_features
        self.ridge = ridge

    def hessian(self, data: ArrayData) -> np.ndarray:
        return data.X.T @ data.X + self.ridge * np.eye(self.n_params)

    def fit(self, data: ArrayData) -> np.ndarray:
        return np.linalg.solve(self.hessian(data), data.X.T @ data.y)

    def per_sample_grads(self, params, data: ArrayData) -> np.ndarray:
        return (data.X @ params - data.y)[:, None] * data.X
