"""Multi-output Gaussian-process regression with a Matern nu=1.5 kernel.

Output dimensions are modeled independently, each with its own length scale,
noise level, and signal variance (optimized in log space by evidence
maximization). Two posterior modes are supported: exact (Cholesky of the full
kernel matrix) and a deterministic FITC inducing-point approximation whose
per-query cost is independent of the training-set size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist

SQRT3 = np.sqrt(3.0)
JITTER = 1e-8
VAR_CLAMP = -1e-9
FORMAT_TAG = "gprace-gp-v1"


class NumericalError(RuntimeError):
    """Posterior produced a variance below the allowed negative tolerance."""


class FactorizationError(NumericalError):
    """Kernel matrix not positive definite even after jitter."""


class OptimizationDiverged(RuntimeError):
    """Evidence decreased over many consecutive accepted steps."""


@dataclass
class Dataset:
    """Regression data with per-column normalization statistics."""

    inputs: np.ndarray   # (D, n)
    targets: np.ndarray  # (D, m)
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    @staticmethod
    def from_arrays(inputs, targets) -> "Dataset":
        inputs = np.asarray(inputs, dtype=float)
        targets = np.asarray(targets, dtype=float)
        if inputs.ndim != 2 or targets.ndim != 2 or inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs (D, n) and targets (D, m) must share D")
        if inputs.shape[0] < 2:
            raise ValueError("need at least 2 observations")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise ValueError("dataset contains non-finite values")
        x_scale = np.maximum(inputs.std(axis=0), 1e-8)
        y_scale = np.maximum(targets.std(axis=0), 1e-8)
        return Dataset(inputs, targets, inputs.mean(axis=0), x_scale,
                       targets.mean(axis=0), y_scale)

    @property
    def n_data(self) -> int:
        return self.inputs.shape[0]

    def normalized(self):
        xn = (self.inputs - self.x_mean) / self.x_scale
        yn = (self.targets - self.y_mean) / self.y_scale
        return xn, yn


@dataclass
class GPHyperparams:
    """Per-output-dimension kernel parameters (all strictly positive)."""

    length_scale: np.ndarray
    noise_std: np.ndarray
    signal_var: np.ndarray

    def __post_init__(self):
        self.length_scale = np.atleast_1d(np.asarray(self.length_scale, dtype=float))
        self.noise_std = np.atleast_1d(np.asarray(self.noise_std, dtype=float))
        self.signal_var = np.atleast_1d(np.asarray(self.signal_var, dtype=float))
        if np.any(self.length_scale <= 0) or np.any(self.noise_std <= 0) \
                or np.any(self.signal_var <= 0):
            raise ValueError("hyperparameters must be strictly positive")

    @property
    def n_outputs(self) -> int:
        return self.length_scale.shape[0]

    @staticmethod
    def default(n_outputs: int) -> "GPHyperparams":
        return GPHyperparams(np.full(n_outputs, 1.0), np.full(n_outputs, 0.1),
                             np.full(n_outputs, 1.0))


def matern32_kernel(x, x_other, length_scale: float, signal_var: float = 1.0):
    """Matern 3/2 covariance s^2 (1 + sqrt(3) r / l) exp(-sqrt(3) r / l)."""
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    r = np.linalg.norm(np.atleast_1d(x) - np.atleast_1d(x_other), axis=-1)
    a = SQRT3 * r / length_scale
    return signal_var * (1.0 + a) * np.exp(-a)


def _matern32_from_dist(r, length_scale, signal_var):
    a = SQRT3 * r / length_scale
    return signal_var * (1.0 + a) * np.exp(-a)


def _chol(mat, what: str):
    try:
        return cho_factor(mat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"{what} not positive definite") from exc


def log_marginal_likelihood(hyper: GPHyperparams, dataset: Dataset):
    """Gaussian log evidence (summed over output dims) and its gradient.

    Returns (value, grad) with grad of shape (m, 3) holding derivatives with
    respect to [log l_j, log sigma_j, log s2_j].
    """
    xn, yn = dataset.normalized()
    n_data = xn.shape[0]
    r_mat = cdist(xn, xn)
    total = 0.0
    grad = np.zeros((hyper.n_outputs, 3))
    for j in range(hyper.n_outputs):
        l_j, sig_j, s2_j = hyper.length_scale[j], hyper.noise_std[j], hyper.signal_var[j]
        y = yn[:, j]
        k_mat = _matern32_from_dist(r_mat, l_j, s2_j)
        ky = k_mat + (sig_j ** 2 + JITTER * s2_j) * np.eye(n_data)
        cf = _chol(ky, "K + sigma^2 I")
        alpha = cho_solve(cf, y)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        total += -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * n_data * np.log(2.0 * np.pi)

        ky_inv = cho_solve(cf, np.eye(n_data))
        w_mat = np.outer(alpha, alpha) - ky_inv
        dk_dlogl = 3.0 * s2_j * (r_mat / l_j) ** 2 * np.exp(-SQRT3 * r_mat / l_j)
        grad[j, 0] = 0.5 * np.sum(w_mat * dk_dlogl)
        grad[j, 1] = 0.5 * np.trace(w_mat) * 2.0 * sig_j ** 2
        grad[j, 2] = 0.5 * np.sum(w_mat * k_mat)
    return total, grad


def _optimize_dim(xn, y, init, max_iter, tol):
    """Armijo gradient ascent on the log evidence of one output dimension."""
    n_data = xn.shape[0]
    r_mat = cdist(xn, xn)
    eye = np.eye(n_data)

    def value_grad(theta):
        l_j, sig_j, s2_j = np.exp(theta)
        k_mat = _matern32_from_dist(r_mat, l_j, s2_j)
        cf = _chol(k_mat + (sig_j ** 2 + JITTER * s2_j) * eye, "K + sigma^2 I")
        alpha = cho_solve(cf, y)
        val = -0.5 * float(y @ alpha) - np.sum(np.log(np.diag(cf[0]))) \
            - 0.5 * n_data * np.log(2.0 * np.pi)
        w_mat = np.outer(alpha, alpha) - cho_solve(cf, eye)
        g = np.array([
            0.5 * np.sum(w_mat * (3.0 * s2_j * (r_mat / l_j) ** 2
                                  * np.exp(-SQRT3 * r_mat / l_j))),
            0.5 * np.trace(w_mat) * 2.0 * sig_j ** 2,
            0.5 * np.sum(w_mat * k_mat),
        ])
        return val, g

    theta = np.log(init)
    val, grad = value_grad(theta)
    step = 0.1
    decreases = 0
    for _ in range(max_iter):
        gnorm2 = float(grad @ grad)
        if gnorm2 < 1e-16:
            break
        accepted = False
        alpha = step
        for _ in range(30):
            cand = theta + alpha * grad
            # Keep hyperparameters in a sane numeric range.
            cand = np.clip(cand, -12.0, 12.0)
            try:
                cand_val, cand_grad = value_grad(cand)
            except FactorizationError:
                alpha *= 0.5
                continue
            if cand_val >= val + 1e-4 * alpha * gnorm2:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        decreases = decreases + 1 if cand_val < val else 0
        if decreases >= 20:
            raise OptimizationDiverged("evidence decreased for 20 consecutive steps")
        rel_change = abs(cand_val - val) / max(abs(val), 1.0)
        theta, val, grad = cand, cand_val, cand_grad
        step = min(alpha * 1.5, 1.0)
        if rel_change < tol:
            break
    return np.exp(theta)


class GPModel:
    """Fitted multi-output GP; immutable after construction, query-safe
    concurrently. Build via :func:`fit` or :meth:`load`."""

    def __init__(self, hyper: GPHyperparams, mode: str, support: np.ndarray,
                 stats: tuple, caches: dict):
        self.hyper = hyper
        self.mode = mode
        self.support = support  # normalized training or inducing inputs (S, n)
        self.x_mean, self.x_scale, self.y_mean, self.y_scale = stats
        self._caches = caches

    @property
    def input_dim(self) -> int:
        return self.support.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.hyper.n_outputs

    def posterior(self, x):
        """Posterior mean and variance of the latent function at x.

        x may be a single point (n,) or a batch (B, n); returns arrays of
        shape (m,) / (B, m) in the original target units.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xq = np.atleast_2d(x)
        if xq.shape[1] != self.input_dim:
            raise ValueError(f"query dim {xq.shape[1]} != model dim {self.input_dim}")
        xn = (xq - self.x_mean) / self.x_scale
        r_mat = cdist(xn, self.support)  # (B, S)

        n_q = xn.shape[0]
        m = self.n_outputs
        mean_n = np.empty((n_q, m))
        var_n = np.empty((n_q, m))
        for j in range(m):
            l_j, s2_j = self.hyper.length_scale[j], self.hyper.signal_var[j]
            k_star = _matern32_from_dist(r_mat, l_j, s2_j)  # (B, S)
            if self.mode == "exact":
                mean_n[:, j] = k_star @ self._caches["alpha"][j]
                v = solve_triangular(self._caches["chol"][j], k_star.T, lower=True)
                var_n[:, j] = s2_j - np.sum(v * v, axis=0)
            else:
                mean_n[:, j] = k_star @ self._caches["beta"][j]
                vu = solve_triangular(self._caches["chol_uu"][j], k_star.T, lower=True)
                vs = solve_triangular(self._caches["chol_sig"][j], k_star.T, lower=True)
                var_n[:, j] = s2_j - np.sum(vu * vu, axis=0) + np.sum(vs * vs, axis=0)

        if np.any(var_n < VAR_CLAMP):
            raise NumericalError(f"posterior variance {var_n.min():.3e} below tolerance")
        var_n = np.maximum(var_n, 0.0)
        mean = mean_n * self.y_scale + self.y_mean
        var = var_n * self.y_scale ** 2
        return (mean[0], var[0]) if single else (mean, var)

    def posterior_packed(self, x):
        """Fast single/batch posterior using precomputed dense caches.

        Numerically equivalent to :meth:`posterior` up to factorization
        round-off; used in sampling rollouts where call volume matters.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xq = np.atleast_2d(x)
        xn = (xq - self.x_mean) / self.x_scale
        r_mat = cdist(xn, self.support)
        a = SQRT3 * r_mat[None, :, :] / self.hyper.length_scale[:, None, None]
        k_star = self.hyper.signal_var[:, None, None] * (1.0 + a) * np.exp(-a)  # (m, B, S)
        mean_n = np.einsum("mbs,ms->bm", k_star, self._packed_mean_vec)
        quad = np.einsum("mbs,mst,mbt->bm", k_star, self._packed_var_mat, k_star)
        var_n = np.maximum(self.hyper.signal_var[None, :] - quad, 0.0)
        mean = mean_n * self.y_scale + self.y_mean
        var = var_n * self.y_scale ** 2
        return (mean[0], var[0]) if single else (mean, var)

    def build_packed_caches(self) -> None:
        """Precompute dense matrices backing :meth:`posterior_packed`."""
        m, s_count = self.n_outputs, self.support.shape[0]
        vec = np.empty((m, s_count))
        mat = np.empty((m, s_count, s_count))
        eye = np.eye(s_count)
        for j in range(m):
            if self.mode == "exact":
                vec[j] = self._caches["alpha"][j]
                inv = cho_solve((self._caches["chol"][j], True), eye)
                mat[j] = inv
            else:
                vec[j] = self._caches["beta"][j]
                inv_uu = cho_solve((self._caches["chol_uu"][j], True), eye)
                inv_sig = cho_solve((self._caches["chol_sig"][j], True), eye)
                mat[j] = inv_uu - inv_sig
        self._packed_mean_vec = vec
        self._packed_var_mat = 0.5 * (mat + np.transpose(mat, (0, 2, 1)))

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format": FORMAT_TAG,
            "mode": self.mode,
        }
        arrays = {
            "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            "length_scale": self.hyper.length_scale,
            "noise_std": self.hyper.noise_std,
            "signal_var": self.hyper.signal_var,
            "support": self.support,
            "x_mean": self.x_mean, "x_scale": self.x_scale,
            "y_mean": self.y_mean, "y_scale": self.y_scale,
        }
        for key, val in self._caches.items():
            arrays["cache_" + key] = val
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def load(path) -> "GPModel":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format") != FORMAT_TAG:
                raise ValueError(f"unsupported model file format: {meta.get('format')}")
            hyper = GPHyperparams(data["length_scale"], data["noise_std"],
                                  data["signal_var"])
            caches = {k[len("cache_"):]: data[k] for k in data.files
                      if k.startswith("cache_")}
            model = GPModel(
                hyper, meta["mode"], data["support"],
                (data["x_mean"], data["x_scale"], data["y_mean"], data["y_scale"]),
                caches,
            )
        model.build_packed_caches()
        return model


def _exact_caches(xn, yn, hyper: GPHyperparams):
    n_data = xn.shape[0]
    r_mat = cdist(xn, xn)
    chols = np.empty((hyper.n_outputs, n_data, n_data))
    alphas = np.empty((hyper.n_outputs, n_data))
    for j in range(hyper.n_outputs):
        k_mat = _matern32_from_dist(r_mat, hyper.length_scale[j], hyper.signal_var[j])
        ky = k_mat + (hyper.noise_std[j] ** 2 + JITTER * hyper.signal_var[j]) * np.eye(n_data)
        cf = _chol(ky, "K + sigma^2 I")
        chols[j] = np.tril(cf[0])
        alphas[j] = cho_solve(cf, yn[:, j])
    return {"chol": chols, "alpha": alphas}


def _fitc_caches(xn, yn, z_pts, hyper: GPHyperparams):
    n_ind = z_pts.shape[0]
    r_uu = cdist(z_pts, z_pts)
    r_uf = cdist(z_pts, xn)
    chol_uu = np.empty((hyper.n_outputs, n_ind, n_ind))
    chol_sig = np.empty((hyper.n_outputs, n_ind, n_ind))
    betas = np.empty((hyper.n_outputs, n_ind))
    eye = np.eye(n_ind)
    for j in range(hyper.n_outputs):
        l_j, sig_j, s2_j = hyper.length_scale[j], hyper.noise_std[j], hyper.signal_var[j]
        k_uu = _matern32_from_dist(r_uu, l_j, s2_j) + JITTER * s2_j * eye
        k_uf = _matern32_from_dist(r_uf, l_j, s2_j)
        cf_uu = _chol(k_uu, "K_uu")
        v = solve_triangular(cf_uu[0], k_uf, lower=True)
        q_diag = np.sum(v * v, axis=0)
        lam = np.maximum(s2_j - q_diag, 0.0) + sig_j ** 2 + JITTER * s2_j
        kl = k_uf / lam
        sigma = k_uu + kl @ k_uf.T
        cf_sig = _chol(sigma, "FITC Sigma")
        chol_uu[j] = np.tril(cf_uu[0])
        chol_sig[j] = np.tril(cf_sig[0])
        betas[j] = cho_solve(cf_sig, kl @ yn[:, j])
    return {"chol_uu": chol_uu, "chol_sig": chol_sig, "beta": betas}


def fit(dataset: Dataset, init: GPHyperparams | None = None, mode: str = "exact",
        n_inducing: int | None = None, seed: int = 0, max_iter: int = 500,
        tol: float = 1e-6, hyper_subsample: int = 400) -> GPModel:
    """Fit hyperparameters by evidence ascent and build posterior caches.

    In inducing mode the hyperparameters are optimized on a deterministic
    subsample of at most ``hyper_subsample`` points (full-set exact evidence
    is cubic in D), then inducing inputs are picked by k-means on the full
    normalized inputs and FITC caches are built.
    """
    if mode not in ("exact", "inducing"):
        raise ValueError(f"unknown mode {mode!r}")
    xn, yn = dataset.normalized()
    n_data, n_in = xn.shape
    m = dataset.targets.shape[1]
    init = init or GPHyperparams.default(m)
    if init.n_outputs != m:
        raise ValueError("init hyperparameter count != target dims")

    if mode == "inducing":
        if n_inducing is None:
            raise ValueError("inducing mode needs n_inducing")
        if n_inducing > n_data:
            raise ValueError("n_inducing must be <= number of data points")

    rng = np.random.default_rng(seed)
    if max_iter > 0:
        if n_data > hyper_subsample:
            sub = rng.choice(n_data, size=hyper_subsample, replace=False)
            x_fit, y_fit = xn[sub], yn[sub]
        else:
            x_fit, y_fit = xn, yn
        ls = np.empty(m)
        ns = np.empty(m)
        sv = np.empty(m)
        for j in range(m):
            ls[j], ns[j], sv[j] = _optimize_dim(
                x_fit, y_fit[:, j],
                np.array([init.length_scale[j], init.noise_std[j], init.signal_var[j]]),
                max_iter, tol)
        hyper = GPHyperparams(ls, ns, sv)
    else:
        hyper = init

    stats = (dataset.x_mean, dataset.x_scale, dataset.y_mean, dataset.y_scale)
    if mode == "exact":
        model = GPModel(hyper, "exact", xn, stats, _exact_caches(xn, yn, hyper))
    else:
        if n_inducing >= n_data:
            z_pts = xn.copy()
        else:
            z_pts, _ = kmeans2(xn, n_inducing, minit="++", seed=rng, iter=20)
        model = GPModel(hyper, "inducing", z_pts, stats,
                        _fitc_caches(xn, yn, z_pts, hyper))
    model.build_packed_caches()
    return model
