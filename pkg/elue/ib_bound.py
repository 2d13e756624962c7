# ELUE/elue/ib_bound.py

"""
Numerical check of the variational bound behind the bottleneck penalty:

    I(X; Y | Z) <= E[log p(x | y, z) / q(x | z)]

with slack E_z KL(p(. | z) || q(. | z)), by exact enumeration over small
discrete alphabets.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import rel_entr
from scipy.stats import entropy

from errors import ShapeError

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12


def _safe_divide(num, den):
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


@dataclass
class DiscreteJoint:
    """
    :param p: joint table p[x, y, z], sums to 1
    :param q: variational table q[x, z], every column q[:, z] sums to 1
    """
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.p.ndim != 3 or self.q.ndim != 2:
            raise ShapeError(f"need p[x, y, z] and q[x, z], got shapes {self.p.shape} and {self.q.shape}")
        if self.q.shape != (self.p.shape[0], self.p.shape[2]):
            raise ShapeError(f"q shape {self.q.shape} does not match p's x and z alphabets {self.p.shape}")
        if np.any(self.p < 0) or np.any(self.q < 0) or not np.all(np.isfinite(self.p)) or not np.all(np.isfinite(self.q)):
            raise ShapeError("probability tables must be finite and non-negative")
        if abs(self.p.sum() - 1.0) > PROB_TOL:
            raise ShapeError(f"p sums to {self.p.sum()!r}, not 1")
        if np.any(np.abs(self.q.sum(axis=0) - 1.0) > PROB_TOL):
            raise ShapeError("every column q[:, z] must sum to 1")

    @property
    def p_z(self):
        return self.p.sum(axis=(0, 1))

    @property
    def p_xz(self):
        return self.p.sum(axis=1)

    @property
    def p_yz(self):
        return self.p.sum(axis=0)


def conditional_mutual_information(j):
    """I(X; Y | Z) = sum p(x,y,z) log p(x,y,z) p(z) / (p(x,z) p(y,z))"""
    independent = _safe_divide(j.p_xz[:, None, :] * j.p_yz[None, :, :], j.p_z[None, None, :])
    return float(np.sum(rel_entr(j.p, independent)))


def variational_bound(j):
    """E[log p(x | y, z) / q(x | z)] = sum p(x,y,z) log p(x,y,z) / (p(y,z) q(x|z))"""
    return float(np.sum(rel_entr(j.p, j.p_yz[None, :, :] * j.q[:, None, :])))


def expected_conditional_kl(j):
    """E_z KL(p(. | z) || q(. | z)), enumerated per z"""
    total = 0.0
    for z, pz in enumerate(j.p_z):
        if pz > 0:
            total += pz * float(entropy(j.p_xz[:, z] / pz, j.q[:, z]))
    return total


def verify_ib_bound(j):
    """:return: (lhs, rhs, slack) with slack = rhs - lhs"""
    lhs = conditional_mutual_information(j)
    rhs = variational_bound(j)
    return lhs, rhs, rhs - lhs


def random_joint(rng, shape=(3, 3, 2), matched_q=False):
    p = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
    p = p / p.sum()
    if matched_q:
        p_xz = p.sum(axis=1)
        q = _safe_divide(p_xz, p_xz.sum(axis=0, keepdims=True))
    else:
        q = rng.dirichlet(np.ones(shape[0]), size=shape[2]).T
        q = q / q.sum(axis=0, keepdims=True)
    return DiscreteJoint(p, q)


@dataclass
class IbTrialReport:
    trials: int
    min_slack: float
    max_kl_gap: float

    @property
    def passed(self):
        return self.min_slack >= -PROB_TOL and self.max_kl_gap <= PROB_TOL


def run_ib_trials(trials=10_000, seed=0, shape=(3, 3, 2)):
    """Random joints and variational tables; slack must be >= 0 and equal E_z KL"""
    rng = np.random.default_rng(seed)
    min_slack, max_gap = np.inf, 0.0
    for _ in range(trials):
        j = random_joint(rng, shape)
        _, _, slack = verify_ib_bound(j)
        min_slack = min(min_slack, slack)
        max_gap = max(max_gap, abs(slack - expected_conditional_kl(j)))
    report = IbTrialReport(trials, float(min_slack), float(max_gap))
    logger.info(f"[IB] {trials} trials: min slack {report.min_slack:.3e}, "
                f"max |slack - E_z KL| {report.max_kl_gap:.3e}")
    return report
