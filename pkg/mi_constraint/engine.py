"""
mi_constraint/engine.py - 风格向量约束（MSE − MI）

L_s = MSE(E, E′) − MI(E, E′)，MI 由统计网络 M 通过 Donsker-Varadhan 下界估计：

    Î(X;Y) = E_joint[M] − log E_marginal[e^M]

联合项用原始 (E_i, E′_i) 配对；边缘项用 E′ 的置换（优先错排）配对。
每个外层训练步：先在当前 batch 上更新 M（inner_steps 次梯度上升），
再以冻结的 M 计算 L_s 中的 MI 项，梯度只流向 E。

另含相关高斯基准（解析 MI = −½ ln(1 − ρ²)）与训练后离线 MI 测量。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel
from torch.func import functional_call

from errors import BatchTooSmall, DimensionMismatch, NonFiniteScore
from settings import MIConfig

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]

_MAX_DERANGEMENT_TRIES = 8


# ---------------------------------------------------------------------------
# 数据模型
# ---------------------------------------------------------------------------

class LossBreakdown(BaseModel):
    l_mel: float
    mse_term: float = 0.0
    mi_term: float = 0.0
    l_s: float = 0.0
    l_total: float = 0.0
    l_mi_estimator: float = 0.0
    l_stop: float = 0.0

    @classmethod
    def compose(
        cls,
        l_mel: float,
        mse_term: float = 0.0,
        mi_term: float = 0.0,
        l_mi_estimator: float = 0.0,
        l_stop: float = 0.0,
    ) -> "LossBreakdown":
        """l_s 与 l_total 在 Python float 上按固定顺序组合，恒等式逐位成立。"""
        l_s = mse_term - mi_term
        return cls(
            l_mel=l_mel,
            mse_term=mse_term,
            mi_term=mi_term,
            l_s=l_s,
            l_total=l_mel + l_s,
            l_mi_estimator=l_mi_estimator,
            l_stop=l_stop,
        )


@dataclass
class MIEstimate:
    value: float
    batch_size: int
    step_count: int
    tensor: Optional[torch.Tensor] = None  # 对 E 可微


class BenchmarkResult(BaseModel):
    rho: float
    estimate: float
    analytic: float
    tolerance: float
    passed: bool

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"rho={self.rho!r} estimate={self.estimate:.4f} analytic={self.analytic:.4f} "
            f"tolerance={self.tolerance} {verdict}"
        )


@dataclass
class ConstraintTerms:
    l_s: torch.Tensor    # 参与反传
    mse_term: float
    mi_term: float


# ---------------------------------------------------------------------------
# 基本量
# ---------------------------------------------------------------------------

def _tensor(x: ArrayLike) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def mse(E: ArrayLike, E_prime: ArrayLike) -> torch.Tensor:
    E, E_prime = _tensor(E), _tensor(E_prime)
    if E.shape != E_prime.shape:
        raise DimensionMismatch(f"MSE operands have shapes {tuple(E.shape)} and {tuple(E_prime.shape)}")
    return ((E - E_prime) ** 2).mean()


def dv_objective(joint_scores: ArrayLike, marginal_scores: ArrayLike) -> torch.Tensor:
    """mean(joint) − log(mean(exp(marginal)))，log-mean-exp 先减去最大值。"""
    joint, marginal = _tensor(joint_scores), _tensor(marginal_scores)
    if joint.numel() < 1 or marginal.numel() < 1:
        raise BatchTooSmall(0)
    if not (torch.isfinite(joint).all() and torch.isfinite(marginal).all()):
        raise NonFiniteScore("statistics network produced non-finite scores")
    shift = marginal.max().detach()
    value = joint.mean() - (shift + torch.log(torch.exp(marginal - shift).mean()))
    if not torch.isfinite(value):
        raise NonFiniteScore("DV objective is not finite")
    return value


def analytic_gaussian_mi(rho: float) -> float:
    return -0.5 * math.log(1.0 - rho * rho)


# ---------------------------------------------------------------------------
# 统计网络与估计器
# ---------------------------------------------------------------------------

class StatisticsNetwork(nn.Module):
    """(x, y) 拼接 → ELU MLP → 标量。输出层零初始化时初始估计恰为 0。"""

    def __init__(self, x_dim: int, y_dim: int, hidden_sizes: Sequence[int] = (256, 256), zero_init_output: bool = True) -> None:
        super().__init__()
        layers: List[nn.Module] = []
        width = x_dim + y_dim
        for h in hidden_sizes:
            layers += [nn.Linear(width, h), nn.ELU()]
            width = h
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, 1)
        if zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(torch.cat([x, y], dim=-1))).squeeze(-1)


class MIEstimator:
    """统计网络 M 及其独立的优化器状态。"""

    def __init__(self, x_dim: int, y_dim: int, cfg: Optional[MIConfig] = None, dtype: torch.dtype = torch.float32) -> None:
        self.cfg = cfg or MIConfig()
        torch_state = torch.random.get_rng_state()
        torch.manual_seed(self.cfg.seed)
        try:
            self.network = StatisticsNetwork(x_dim, y_dim, self.cfg.hidden_sizes, self.cfg.zero_init_output).to(dtype)
        finally:
            torch.random.set_rng_state(torch_state)
        self.optimizer = torch.optim.Adam(self.network.parameters(), lr=self.cfg.lr)
        self.dtype = dtype
        self.step_count = 0
        self.ema_denominator: Optional[torch.Tensor] = None

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    def permutation(self, b: int, offset: int = 0) -> torch.Tensor:
        """按 (seed, step_count) 播种的置换；尽量取错排，8 次都失败则循环移位 1。"""
        gen = torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + self.step_count + offset)
        identity = torch.arange(b)
        for _ in range(_MAX_DERANGEMENT_TRIES):
            perm = torch.randperm(b, generator=gen)
            if not (perm == identity).any():
                return perm
        return torch.roll(identity, 1)

    def _scores(self, E: torch.Tensor, E_prime: torch.Tensor, perm: torch.Tensor, params=None) -> Tuple[torch.Tensor, torch.Tensor]:
        if params is None:
            return self.network(E, E_prime), self.network(E, E_prime[perm])
        joint = functional_call(self.network, params, (E, E_prime))
        marginal = functional_call(self.network, params, (E, E_prime[perm]))
        return joint, marginal

    def update(self, E: torch.Tensor, E_prime: torch.Tensor) -> float:
        """inner_steps 次梯度上升；返回更新后 M 在同一组配对上的 DV 值。"""
        b = E.shape[0]
        if b < 2:
            raise BatchTooSmall(b)
        E, E_prime = E.detach(), E_prime.detach()
        self.network.train()

        for _ in range(self.cfg.inner_steps):
            perm = self.permutation(b)
            joint, marginal = self._scores(E, E_prime, perm)
            if self.cfg.ema_decay is None:
                loss = -dv_objective(joint, marginal)
            else:
                loss = -self._ema_corrected(joint, marginal)
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            self.step_count += 1

        with torch.no_grad():
            joint, marginal = self._scores(E, E_prime, perm)
            return float(dv_objective(joint, marginal))

    def _ema_corrected(self, joint: torch.Tensor, marginal: torch.Tensor) -> torch.Tensor:
        """分母用滑动平均修正梯度偏差；返回值仅用于反传。"""
        denominator = torch.exp(marginal).mean()
        if self.ema_denominator is None:
            self.ema_denominator = denominator.detach()
        else:
            decay = self.cfg.ema_decay
            self.ema_denominator = ((1.0 - decay) * denominator + decay * self.ema_denominator).detach()
        return joint.mean() - denominator / self.ema_denominator

    def estimate(self, E: torch.Tensor, E_prime: torch.Tensor) -> MIEstimate:
        """M 的参数视为常量、E′ 视为常量；结果只对 E 可微。不更新任何状态。"""
        b = E.shape[0]
        if b < 2:
            raise BatchTooSmall(b)
        params = {k: v.detach() for k, v in self.network.named_parameters()}
        joint, marginal = self._scores(E, E_prime.detach(), self.permutation(b), params)
        value = dv_objective(joint, marginal)
        return MIEstimate(value=float(value), batch_size=b, step_count=self.step_count, tensor=value)

    def state_dict(self) -> dict:
        return {
            "network": self.network.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step_count": self.step_count,
        }

    def load_state_dict(self, state: dict) -> None:
        self.network.load_state_dict(state["network"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step_count = int(state["step_count"])


def _pairs(batch) -> Tuple[torch.Tensor, torch.Tensor]:
    E, E_prime = batch
    E, E_prime = _tensor(E), _tensor(E_prime)
    if E.dim() == 1:
        E, E_prime = E.unsqueeze(-1), E_prime.unsqueeze(-1)
    if E.shape[0] != E_prime.shape[0]:
        raise DimensionMismatch(f"batch halves have {E.shape[0]} and {E_prime.shape[0]} rows")
    return E, E_prime


def update_estimator(batch, est: MIEstimator, cfg: Optional[MIConfig] = None) -> Tuple[MIEstimator, float]:
    if cfg is not None:
        est.cfg = cfg
    E, E_prime = _pairs(batch)
    return est, est.update(E.to(est.dtype), E_prime.to(est.dtype))


def estimate_mi(batch, est: MIEstimator) -> MIEstimate:
    E, E_prime = _pairs(batch)
    return est.estimate(E.to(est.dtype), E_prime.to(est.dtype))


# ---------------------------------------------------------------------------
# 约束损失
# ---------------------------------------------------------------------------

def style_constraint_loss(
    E_batch: torch.Tensor,
    E_prime_batch: torch.Tensor,
    est: Optional[MIEstimator],
    use_mse: bool,
    use_mi: bool,
    mse_weight: float = 1.0,
    mi_weight: float = 1.0,
) -> ConstraintTerms:
    if E_batch.shape != E_prime_batch.shape:
        raise DimensionMismatch(f"E {tuple(E_batch.shape)} vs E' {tuple(E_prime_batch.shape)}")
    E_prime_batch = E_prime_batch.detach()
    l_s = E_batch.new_zeros(())
    mse_term = mi_term = 0.0

    if use_mse:
        weighted = mse_weight * mse(E_batch, E_prime_batch)
        l_s = l_s + weighted
        mse_term = float(weighted)
    if use_mi:
        if est is None:
            raise DimensionMismatch("MI term requested without an estimator")
        weighted = mi_weight * est.estimate(E_batch, E_prime_batch).tensor
        l_s = l_s - weighted
        mi_term = float(weighted)

    return ConstraintTerms(l_s=l_s, mse_term=mse_term, mi_term=mi_term)


# ---------------------------------------------------------------------------
# 高斯基准 / 离线测量
# ---------------------------------------------------------------------------

def correlated_gaussians(rho: float, n: int, gen: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.randn(n, 1, generator=gen)
    noise = torch.randn(n, 1, generator=gen)
    y = rho * x + math.sqrt(1.0 - rho * rho) * noise
    return x, y


def run_gaussian_benchmark(
    rho: float,
    samples: int = 2000,
    steps: int = 3000,
    cfg: Optional[MIConfig] = None,
    batch_size: int = 512,
    tolerance: float = 0.1,
    independence_bound: float = 0.05,
) -> BenchmarkResult:
    """每步新采一批相关高斯训练 M；最终在 samples 对留出样本上估计。"""
    if not -1.0 < rho < 1.0:
        raise DimensionMismatch(f"rho must lie in (-1, 1), got {rho}")
    cfg = cfg or MIConfig()
    est = MIEstimator(1, 1, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)

    for step in range(steps):
        x, y = correlated_gaussians(rho, batch_size, gen)
        value = est.update(x, y)
        if step % 500 == 0:
            logger.debug("mi-bench rho=%s step=%d dv=%.4f", rho, step, value)

    x, y = correlated_gaussians(rho, samples, gen)
    with torch.no_grad():
        estimate = est.estimate(x, y).value
    analytic = analytic_gaussian_mi(rho)
    if rho == 0.0:
        passed = estimate <= independence_bound and estimate >= -tolerance
    else:
        passed = abs(estimate - analytic) <= tolerance
    return BenchmarkResult(rho=rho, estimate=estimate, analytic=analytic, tolerance=tolerance, passed=passed)


def estimate_posthoc_mi(
    E_all: ArrayLike,
    E_prime_all: ArrayLike,
    cfg: Optional[MIConfig] = None,
    steps: int = 500,
) -> MIEstimate:
    """在已训练模型导出的 (E, E′) 上训练一个全新的 M，返回全集上的估计。"""
    cfg = cfg or MIConfig()
    E, E_prime = _pairs((E_all, E_prime_all))
    E, E_prime = E.float(), E_prime.float()
    n = E.shape[0]
    if n < 2:
        raise BatchTooSmall(n)

    est = MIEstimator(E.shape[1], E_prime.shape[1], cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    b = min(cfg.batch_size, n)
    for _ in range(steps):
        idx = torch.randperm(n, generator=gen)[:b]
        est.update(E[idx], E_prime[idx])
    with torch.no_grad():
        return est.estimate(E, E_prime)
