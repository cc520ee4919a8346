"""Loss components of the OD-SN / OD-CWA objectives and their gradients.

Class layout for ``K`` known classes: ids ``0..K-1`` are known, ``K`` is the
unknown class and ``K+1`` is background, so ``C_total = K + 2``.

Every loss returns a :class:`LossTerm` holding the value and the gradient
with respect to its input (logits or embeddings, matching the input shape).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numerics import log_sum_exp_rows, softmax_rows
from .transport import EmpiricalMeasure, cost_sensitivity, entropic_cost

MODES = ("OD-SN", "OD-CWA", "CE-baseline")


@dataclass
class LossTerm:
    value: float
    grad: np.ndarray
    skipped: int = 0
    warning: str | None = None


class MemoryBank:
    """Per-class FIFO queues of unit embeddings, bounded at ``capacity`` each."""

    def __init__(self, num_known: int, dim: int, capacity: int = 64):
        self.num_known = int(num_known)
        self.dim = int(dim)
        self.capacity = int(capacity)
        self._queues: dict[int, deque] = {c: deque(maxlen=self.capacity) for c in range(self.num_known)}

    def enqueue(self, embeddings: np.ndarray, labels) -> None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        for z, c in zip(embeddings, labels):
            c = int(c)
            if c not in self._queues:
                continue  # unknown and background embeddings are never stored
            norm = np.linalg.norm(z)
            if norm == 0.0:
                continue
            self._queues[c].append(np.array(z / norm))

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def count(self, c: int) -> int:
        return len(self._queues[c])

    def queue(self, c: int) -> list[np.ndarray]:
        return list(self._queues[c])

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored embeddings ``(m, dim)`` with their class ids, in class then FIFO order."""
        zs, ys = [], []
        for c in range(self.num_known):
            for z in self._queues[c]:
                zs.append(z)
                ys.append(c)
        if not zs:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=int)
        return np.vstack(zs), np.asarray(ys, dtype=int)


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray
    magnitude: float


def build_anchors(num_known: int, num_classes: int, magnitude: float = 20.0) -> AnchorSet:
    """Anchor ``c`` is ``magnitude * onehot(c)`` in logit space."""
    if num_known > num_classes:
        raise ValueError("more known classes than logit dimensions")
    return AnchorSet(magnitude * np.eye(num_known, num_classes), float(magnitude))


def instance_contrastive_loss(z, labels, bank: MemoryBank, tau: float = 0.1) -> LossTerm:
    """Supervised contrastive loss of batch embeddings against the memory bank.

    For sample ``i`` of class ``c``: the mean over same-class bank entries
    ``j`` of ``-log softmax_k(z_i . z_k / tau)[j]`` with ``k`` ranging over
    the whole bank.  Samples whose class has no bank entries are skipped;
    the value is the mean over the rest.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    grad = np.zeros_like(z)
    bank_z, bank_y = bank.snapshot()
    if bank_z.shape[0] == 0:
        return LossTerm(0.0, grad, skipped=z.shape[0], warning="empty memory bank")

    sim = z @ bank_z.T / tau
    log_prob = sim - log_sum_exp_rows(sim)[:, None]
    prob = np.exp(log_prob)
    pos = labels[:, None] == bank_y[None, :]
    n_pos = pos.sum(axis=1)
    used = n_pos > 0
    n_used = int(used.sum())
    if n_used == 0:
        return LossTerm(0.0, grad, skipped=z.shape[0], warning="no positives in bank")

    per_sample = np.zeros(z.shape[0])
    per_sample[used] = -(log_prob[used] * pos[used]).sum(axis=1) / n_pos[used]
    value = float(per_sample[used].sum() / n_used)

    # d/dsim_ik = p_ik - pos_ik / |M|
    g_sim = np.zeros_like(sim)
    g_sim[used] = prob[used] - pos[used] / n_pos[used, None]
    grad = (g_sim @ bank_z) / (tau * n_used)
    return LossTerm(value, grad, skipped=int(z.shape[0] - n_used))


def cross_entropy_loss(logits, labels) -> LossTerm:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n, C = logits.shape
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError("label out of range")
    lse = log_sum_exp_rows(logits)
    value = float(np.mean(lse - logits[np.arange(n), labels]))
    grad = softmax_rows(logits)
    grad[np.arange(n), labels] -= 1.0
    return LossTerm(value, grad / n)


def uncertainty_weight(p_true: np.ndarray, alpha_w: float = 1.0) -> np.ndarray:
    return (1.0 - p_true) ** alpha_w * p_true


def unknown_probability_loss(
    logits, labels, alpha_w: float = 1.0, unknown_index: int = -1, weight: np.ndarray | None = None
) -> LossTerm:
    """Uncertainty-weighted log-probability of the unknown class with the true logit removed.

    ``-(1 - p_t)^alpha_w * p_t * log( exp(L_u) / sum_{j != t} exp(L_j) )``,
    averaged over the rows given.  The weight is held constant in the
    gradient; passing ``weight`` pins it to given values, which makes the
    returned gradient the exact derivative of the returned value.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n, C = logits.shape
    if n == 0:
        return LossTerm(0.0, np.zeros_like(logits))
    u = unknown_index % C
    if np.any(labels == u):
        raise ValueError("UP loss undefined for unknown ground truth")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError("label out of range")
    rows = np.arange(n)
    p_true = softmax_rows(logits)[rows, labels]
    w = uncertainty_weight(p_true, alpha_w) if weight is None else np.asarray(weight, dtype=np.float64)

    masked = logits.copy()
    masked[rows, labels] = -np.inf
    lse = log_sum_exp_rows(masked)
    log_pu = logits[:, u] - lse
    value = float(np.mean(-w * log_pu))

    q = np.exp(masked - lse[:, None])  # softmax without the true class; 0 there
    g = q.copy()
    g[:, u] -= 1.0
    grad = (w[:, None] * g) / n
    return LossTerm(value, grad)


def _cost_grad(X: np.ndarray, Y: np.ndarray, p: float) -> np.ndarray:
    """d|x_k - y_l|_1^p / dx_k for every pair, shape (n, m, d)."""
    diff = X[:, None, :] - Y[None, :, :]
    s = np.sign(diff)
    if p == 1:
        return s
    dist = np.abs(diff).sum(axis=-1, keepdims=True)
    return p * dist ** (p - 1) * s


def cwa_loss(logits, labels, anchors: AnchorSet, p: float = 1.0, blur: float = 0.1, **sinkhorn_kw) -> LossTerm:
    """Sum over known classes in the batch of the debiased Sinkhorn divergence
    between that class's logit cloud and a Dirac at its anchor.

    The cloud-to-anchor coupling is forced, so its plan is held fixed; the
    self-transport term is differentiated through its plan.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    grad = np.zeros_like(logits)
    K = anchors.anchors.shape[0]
    present = [c for c in range(K) if np.any(labels == c)]
    if not present:
        return LossTerm(0.0, grad, warning="no known-class samples")

    value = 0.0
    for c in present:
        idx = np.flatnonzero(labels == c)
        X = logits[idx]
        P = EmpiricalMeasure.uniform(X)
        A = EmpiricalMeasure.dirac(anchors.anchors[c])
        # Dirac target: the coupling is forced, OT(A, A) = 0
        ot_pa, plan_pa, _ = entropic_cost(P, A, p, blur, **sinkhorn_kw)
        ot_pp, plan_pp, C_pp = entropic_cost(P, P, p, blur, **sinkhorn_kw)
        value += ot_pa - 0.5 * ot_pp

        g = np.einsum("kl,kld->kd", plan_pa.plan, _cost_grad(X, A.points, p))
        G = cost_sensitivity(plan_pp, C_pp)
        g -= 0.5 * np.einsum("kl,kld->kd", G + G.T, _cost_grad(X, X, p))
        grad[idx] += g
    return LossTerm(float(value), grad)


def predictive_entropy(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    logp = logits - log_sum_exp_rows(logits)[:, None]
    return -np.sum(np.exp(logp) * logp, axis=1)


def mine_hard_examples(logits, labels, num_known: int, k_fg: int = 3, k_bg: int = 3) -> np.ndarray:
    """Indices of the ``k_fg`` foreground and ``k_bg`` background rows with the
    highest predictive entropy (ties to the lower index), foreground first."""
    labels = np.asarray(labels, dtype=int)
    H = predictive_entropy(logits)
    bg = num_known + 1
    picked = []
    for mask, k in ((labels < num_known, k_fg), (labels == bg, k_bg)):
        idx = np.flatnonzero(mask)
        order = np.argsort(-H[idx], kind="stable")
        picked.append(idx[order[:k]])
    return np.concatenate(picked).astype(int)


def delta_schedule(delta0: float, k: int, k_max: int) -> float:
    """Linear decay from ``delta0`` at ``k = 0`` to 0 at ``k = k_max``."""
    if k_max <= 0:
        return 0.0
    return float(delta0 * max(0.0, 1.0 - k / k_max))


@dataclass(frozen=True)
class LossCoefficients:
    lam: float = 1.7e-3
    beta: float = 0.5
    delta: float = 0.21
    tau: float = 0.1
    alpha_w: float = 1.0
    p: float = 1.0
    blur: float = 0.1


@dataclass
class LossBreakdown:
    l_ic: float
    l_ce: float
    l_up: float
    l_cwa: float
    total: float
    lam: float
    beta: float
    delta: float
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "l_ic": self.l_ic,
            "l_ce": self.l_ce,
            "l_up": self.l_up,
            "l_cwa": self.l_cwa,
            "total": self.total,
            "lambda": self.lam,
            "beta": self.beta,
            "delta": self.delta,
        }


def combined_loss(
    mode: str,
    logits: np.ndarray,
    embeddings: np.ndarray,
    labels,
    bank: MemoryBank,
    anchors: AnchorSet,
    coef: LossCoefficients,
    mined: np.ndarray,
    num_known: int,
    up_weight: np.ndarray | None = None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Weighted objective and its gradients w.r.t. logits and embeddings.

    ``OD-CWA``: ``lam*L_cwa + beta*L_up + L_ce + delta*L_ic``;
    ``OD-SN`` drops the CWA term; ``CE-baseline`` keeps only ``L_ce``.
    ``up_weight`` pins the uncertainty weights of the mined rows.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    labels = np.asarray(labels, dtype=int)
    flags: list[str] = []

    ce = cross_entropy_loss(logits, labels)
    g_logits = ce.grad.copy()
    g_emb = np.zeros_like(embeddings)
    l_ic = l_up = l_cwa = 0.0
    lam = beta = delta = 0.0

    if mode != "CE-baseline":
        beta, delta = coef.beta, coef.delta
        mined = np.asarray(mined, dtype=int)
        up = unknown_probability_loss(logits[mined], labels[mined], coef.alpha_w, num_known, up_weight)
        l_up = up.value
        g_logits[mined] += beta * up.grad

        fg = np.flatnonzero(labels < num_known)
        ic = instance_contrastive_loss(embeddings[fg], labels[fg], bank, coef.tau)
        l_ic = ic.value
        if ic.warning:
            flags.append(ic.warning)
        g_emb[fg] += delta * ic.grad

    total = ce.value + beta * l_up + delta * l_ic

    if mode == "OD-CWA":
        lam = coef.lam
        cwa = cwa_loss(logits, labels, anchors, coef.p, coef.blur)
        l_cwa = cwa.value
        if cwa.warning:
            flags.append(cwa.warning)
        g_logits += lam * cwa.grad
        total = total + lam * l_cwa

    bd = LossBreakdown(l_ic, ce.value, l_up, l_cwa, float(total), lam, beta, delta, flags)
    return bd, g_logits, g_emb
