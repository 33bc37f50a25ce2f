"""Clock-offset distributions and preceding-probabilities between noisy timestamps.

A client stamps message ``i`` with its local clock reading ``T_i``.  Seen from the
sequencer clock the message really happened at ``T_i + theta_i`` where the offset
``theta_i`` is unknown but follows the client's :data:`ClockModel`.  Everything here
is expressed in microseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InvalidDistributionError, TieError

#: Gaussian models are discretized over ``mean +/- GAUSS_SPAN * std``.
GAUSS_SPAN = 8.0
NORMALIZATION_TOL = 1e-6
# Hard cap on lattice cells per discretized input; a finer request is almost always a unit mistake.
MAX_CELLS = 1 << 24


@dataclass(frozen=True)
class GaussianOffset:
    """Normal offset ``N(mean, std**2)``; ``std == 0`` is a point mass at ``mean``."""

    mean: float
    std: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise InvalidDistributionError("gaussian mean and std must be finite")
        if self.std < 0:
            raise InvalidDistributionError(f"gaussian std must be >= 0, got {self.std}")

    @property
    def is_point_mass(self) -> bool:
        return self.std == 0


@dataclass(frozen=True, eq=False)
class EmpiricalOffset:
    """Piecewise-constant offset density over ``bin_edges`` (per-microsecond densities)."""

    bin_edges: np.ndarray
    densities: np.ndarray
    cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        edges = np.array(self.bin_edges, dtype=np.float64)
        dens = np.array(self.densities, dtype=np.float64)
        if edges.ndim != 1 or dens.ndim != 1 or dens.size == 0:
            raise InvalidDistributionError("empirical model needs 1-D, nonempty edges and densities")
        if edges.size != dens.size + 1:
            raise InvalidDistributionError(
                f"len(bin_edges) must be len(densities) + 1, got {edges.size} and {dens.size}"
            )
        if not np.all(np.isfinite(edges)) or not np.all(np.isfinite(dens)):
            raise InvalidDistributionError("empirical edges and densities must be finite")
        if not np.all(np.diff(edges) > 0):
            raise InvalidDistributionError("bin_edges must be strictly increasing")
        if np.any(dens < 0):
            raise InvalidDistributionError("densities must be nonnegative")
        cdf = np.concatenate(([0.0], np.cumsum(dens * np.diff(edges))))
        if abs(cdf[-1] - 1.0) > NORMALIZATION_TOL:
            raise InvalidDistributionError(f"densities integrate to {cdf[-1]!r}, expected 1")
        cdf /= cdf[-1]
        for arr in (edges, dens, cdf):
            arr.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "densities", dens)
        object.__setattr__(self, "cdf", cdf)

    @property
    def is_point_mass(self) -> bool:
        return False

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmpiricalOffset):
            return NotImplemented
        return np.array_equal(self.bin_edges, other.bin_edges) and np.array_equal(
            self.densities, other.densities
        )

    __hash__ = object.__hash__


ClockModel = Union[GaussianOffset, EmpiricalOffset]


@dataclass(frozen=True, eq=False)
class DifferencePdf:
    """Discretized density of ``theta_j - theta_i`` with its CDF cached at every edge."""

    bin_edges: np.ndarray
    densities: np.ndarray
    cdf: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def masses(self) -> np.ndarray:
        return self.densities * np.diff(self.bin_edges)

    def mean(self) -> float:
        return float(np.dot(self.centers, self.masses))

    def variance(self) -> float:
        """Variance of the piecewise-uniform density (includes the within-bin width term)."""
        widths = np.diff(self.bin_edges)
        mu = self.mean()
        return float(np.dot(self.masses, (self.centers - mu) ** 2 + widths**2 / 12.0))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_from_dict(obj: Mapping[str, Any]) -> ClockModel:
    kind = obj.get("kind")
    try:
        if kind == "gaussian":
            return GaussianOffset(float(obj["mean"]), float(obj["std"]))
        if kind == "empirical":
            return EmpiricalOffset(np.asarray(obj["bin_edges"], float), np.asarray(obj["densities"], float))
    except KeyError as exc:
        raise InvalidDistributionError(f"clock model missing field {exc.args[0]!r}") from None
    raise InvalidDistributionError(f"unknown clock model kind {kind!r}")


def model_to_dict(model: ClockModel) -> dict[str, Any]:
    if isinstance(model, GaussianOffset):
        return {"kind": "gaussian", "mean": model.mean, "std": model.std}
    return {
        "kind": "empirical",
        "bin_edges": model.bin_edges.tolist(),
        "densities": model.densities.tolist(),
    }


# ---------------------------------------------------------------------------
# moments, CDF, quantiles
# ---------------------------------------------------------------------------


def offset_mean(model: ClockModel) -> float:
    if isinstance(model, GaussianOffset):
        return model.mean
    centers = 0.5 * (model.bin_edges[:-1] + model.bin_edges[1:])
    return float(np.dot(centers, np.diff(model.cdf)))


def offset_std(model: ClockModel) -> float:
    if isinstance(model, GaussianOffset):
        return model.std
    e = model.bin_edges
    w = np.diff(e)
    mass = np.diff(model.cdf)
    centers = 0.5 * (e[:-1] + e[1:])
    mu = float(np.dot(centers, mass))
    return math.sqrt(float(np.dot(mass, (centers - mu) ** 2 + w**2 / 12.0)))


def offset_cdf(model: ClockModel, x: float, strict: bool = False) -> float:
    """``P(theta <= x)``, or ``P(theta < x)`` when *strict* (matters only for point masses)."""
    if isinstance(model, GaussianOffset):
        if model.std == 0:
            return float(x > model.mean) if strict else float(x >= model.mean)
        return float(ndtr((x - model.mean) / model.std))
    return float(np.interp(x, model.bin_edges, model.cdf, left=0.0, right=1.0))


def offset_quantile(model: ClockModel, q: float) -> float:
    """Smallest ``t`` with ``P(theta <= t) >= q``."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    if isinstance(model, GaussianOffset):
        if model.std == 0:
            return model.mean
        return float(model.mean + model.std * ndtri(q))
    # the CDF is piecewise linear, so after the bisection the bin is inverted exactly
    k = int(np.searchsorted(model.cdf, q, side="left"))
    lo_e, hi_e = model.bin_edges[k - 1], model.bin_edges[k]
    lo_c, hi_c = model.cdf[k - 1], model.cdf[k]
    return float(lo_e + (q - lo_c) / (hi_c - lo_c) * (hi_e - lo_e))


# ---------------------------------------------------------------------------
# preceding-probability
# ---------------------------------------------------------------------------


def preceding_prob_gaussian(t_i: float, t_j: float, c_i: GaussianOffset, c_j: GaussianOffset) -> float:
    """``P(T_i* < T_j*)`` for Gaussian offsets, in closed form.

    Raises :class:`TieError` when both offsets are point masses that put the two
    messages at the same instant.
    """
    scale = math.hypot(c_i.std, c_j.std)
    # true time is local + offset, so the gap between true times shifts by mu_j - mu_i
    gap = (t_j + c_j.mean) - (t_i + c_i.mean)
    if scale == 0.0:
        if gap == 0.0:
            raise TieError("exact tie: point-mass offsets give identical true timestamps")
        return 1.0 if gap > 0 else 0.0
    return float(ndtr(gap / scale))


def _discretize(model: ClockModel, resolution: float) -> tuple[float, np.ndarray]:
    """Masses of *model* on a lattice of spacing *resolution*; returns (first cell center, masses)."""
    if isinstance(model, GaussianOffset):
        if model.std == 0:
            return model.mean, np.ones(1)
        half = math.ceil(GAUSS_SPAN * model.std / resolution)
        if 2 * half + 1 > MAX_CELLS:
            raise ValueError(f"resolution {resolution} too fine for std {model.std}")
        k = np.arange(-half, half + 1, dtype=np.float64)
        hi_z = (k + 0.5) * resolution / model.std
        lo_z = (k - 0.5) * resolution / model.std
        # take differences in whichever tail keeps them away from 1 - 1 cancellation
        masses = np.where(k >= 0, ndtr(-lo_z) - ndtr(-hi_z), ndtr(hi_z) - ndtr(lo_z))
        return model.mean - half * resolution, masses
    e0, e1 = model.bin_edges[0], model.bin_edges[-1]
    n = max(1, math.ceil((e1 - e0) / resolution - 1e-9))
    if n > MAX_CELLS:
        raise ValueError(f"resolution {resolution} too fine for support width {e1 - e0}")
    lattice = e0 + resolution * np.arange(n + 1)
    masses = np.diff(np.interp(lattice, model.bin_edges, model.cdf, left=0.0, right=1.0))
    return e0 + 0.5 * resolution, masses


def _fft_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n_out = a.size + b.size - 1
    nfft = 1 << (n_out - 1).bit_length()
    out = np.fft.irfft(np.fft.rfft(a, nfft) * np.fft.rfft(b, nfft), nfft)[:n_out]
    return out


def difference_pdf(c_i: ClockModel, c_j: ClockModel, resolution: float = 1.0) -> DifferencePdf:
    """Density of ``theta_j - theta_i`` by FFT convolution of ``f_j`` with the reflection of ``f_i``."""
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    start_i, mass_i = _discretize(c_i, resolution)
    start_j, mass_j = _discretize(c_j, resolution)
    if not (mass_i.sum() > 0 and mass_j.sum() > 0):
        raise InvalidDistributionError("cannot normalize an offset distribution with zero mass")
    last_i = start_i + (mass_i.size - 1) * resolution
    masses = _fft_convolve(mass_j / mass_j.sum(), mass_i[::-1] / mass_i.sum())
    np.clip(masses, 0.0, None, out=masses)
    total = masses.sum()
    if not total > 0:
        raise InvalidDistributionError("difference distribution has zero mass")
    masses /= total
    first_center = start_j - last_i
    edges = first_center - 0.5 * resolution + resolution * np.arange(masses.size + 1)
    cdf = np.concatenate(([0.0], np.cumsum(masses)))
    cdf[-1] = 1.0
    return DifferencePdf(bin_edges=edges, densities=masses / resolution, cdf=cdf)


def tail_probability(pdf: DifferencePdf, x):
    """``P(delta > x)`` with the CDF linearly interpolated inside the bin holding *x*.

    Accepts a scalar or an array of thresholds.
    """
    cdf_at = np.interp(x, pdf.bin_edges, pdf.cdf, left=0.0, right=1.0)
    tail = 1.0 - cdf_at
    return float(tail) if np.ndim(tail) == 0 else tail


def preceding_prob(
    t_i: float,
    t_j: float,
    c_i: ClockModel,
    c_j: ClockModel,
    resolution: float = 1.0,
    method: str = "auto",
) -> float:
    """``P(T_i* < T_j* | T_i, T_j)``.

    ``method="auto"`` uses the closed form when both models are Gaussian and the
    FFT difference density otherwise; ``"empirical"`` forces the FFT path.
    """
    if method not in ("auto", "empirical"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto" and isinstance(c_i, GaussianOffset) and isinstance(c_j, GaussianOffset):
        return preceding_prob_gaussian(t_i, t_j, c_i, c_j)
    return tail_probability(difference_pdf(c_i, c_j, resolution), t_i - t_j)


def dispatch_path(c_i: ClockModel, c_j: ClockModel) -> str:
    both_gauss = isinstance(c_i, GaussianOffset) and isinstance(c_j, GaussianOffset)
    return "closed-form" if both_gauss else "empirical"


def preceding_matrix(
    local_ts: Sequence[float] | np.ndarray,
    models: Sequence[ClockModel],
    resolution: float = 1.0,
) -> np.ndarray:
    """All pairwise preceding-probabilities: ``P[i, j] = P(T_i* < T_j*)``.

    *models* holds one model per message; messages sharing a model object share
    one difference density per model pair.  Degenerate point-mass ties come out as
    exactly 0.5 in both directions.  The diagonal is 0.
    """
    t = np.asarray(local_ts, dtype=np.float64)
    n = t.size
    if len(models) != n:
        raise ValueError("need one model per timestamp")
    P = np.zeros((n, n))
    if n == 0:
        return P

    groups: dict[int, list[int]] = {}
    uniq: dict[int, ClockModel] = {}
    for idx, m in enumerate(models):
        groups.setdefault(id(m), []).append(idx)
        uniq[id(m)] = m

    gauss = np.array([isinstance(m, GaussianOffset) for m in models])
    if gauss.any():
        g = np.flatnonzero(gauss)
        mu = np.array([models[k].mean for k in g])
        sd = np.array([models[k].std for k in g])
        eff = t[g] + mu
        gap = eff[None, :] - eff[:, None]
        scale = np.hypot(sd[:, None], sd[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            block = ndtr(gap / scale)
        degenerate = scale == 0
        block[degenerate] = np.where(gap[degenerate] > 0, 1.0, np.where(gap[degenerate] < 0, 0.0, 0.5))
        P[np.ix_(g, g)] = block

    keys = list(groups)
    for ka in keys:
        for kb in keys:
            ma, mb = uniq[ka], uniq[kb]
            if isinstance(ma, GaussianOffset) and isinstance(mb, GaussianOffset):
                continue
            ia, ib = np.array(groups[ka]), np.array(groups[kb])
            pdf = difference_pdf(ma, mb, resolution)
            P[np.ix_(ia, ib)] = tail_probability(pdf, t[ia][:, None] - t[ib][None, :])
    np.fill_diagonal(P, 0.0)
    return P
