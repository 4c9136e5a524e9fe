"""Counterfactual objective: semantics preservation, manifold consistency and
functional consistency, combined with weights lambda1, lambda2, lambda3."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from src.classifier import TrainedBundle
from src.errors import ConfigError, IncompatibilityError
from src.priors import l2_norm, tv_norm

SEMANTICS_MODES = ('iso', 'lso')
CONSISTENCY_MODES = ('none', 'dep', 'duq')


@dataclass(frozen=True)
class TargetSpec:
    """Desired class flip source_label -> target_label."""

    target_label: int
    source_label: int
    mode: str = 'flip_to_class'

    def __post_init__(self) -> None:
        if self.mode != 'flip_to_class':
            raise ConfigError(f"unsupported target mode '{self.mode}'")
        if self.target_label == self.source_label:
            raise ConfigError(
                f"target label must differ from source label (both {self.target_label})"
            )

    def to_dict(self) -> Dict[str, int]:
        return {'target_label': self.target_label, 'source_label': self.source_label, 'mode': self.mode}


@dataclass(frozen=True)
class ObjectiveSpec:
    """Weights and modes of the counterfactual objective.

    ``lso_taps=None`` selects every classifier tap; ``s_star=None`` takes the
    DEP target loss from the bundle's training statistics.
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    semantics_mode: str = 'lso'
    lso_taps: Optional[Sequence[str]] = None
    consistency_mode: str = 'dep'
    s_star: Optional[float] = None
    tau: float = 0.5
    kappa: float = 2.0
    tv_weight: float = 0.0
    l2_weight: float = 0.0

    def __post_init__(self) -> None:
        for name in ('lambda1', 'lambda2', 'lambda3', 'tv_weight', 'l2_weight'):
            value = getattr(self, name)
            if not (value >= 0 and value != float('inf')):
                raise ConfigError(f"{name} must be a finite non-negative number, got {value}")
        if self.semantics_mode not in SEMANTICS_MODES:
            raise ConfigError(f"unknown semantics mode '{self.semantics_mode}'")
        if self.consistency_mode not in CONSISTENCY_MODES:
            raise ConfigError(f"unknown consistency mode '{self.consistency_mode}'")
        if self.kappa <= 1:
            raise ConfigError(f"kappa must be > 1, got {self.kappa}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.s_star is not None and self.s_star < 0:
            raise ConfigError(f"s_star must be >= 0, got {self.s_star}")

    def check_bundle(self, bundle: TrainedBundle) -> None:
        """Raise before any optimization when the bundle cannot serve this objective."""
        if self.consistency_mode == 'dep' and bundle.loss_predictor is None:
            raise IncompatibilityError("bundle lacks loss predictor")
        if self.consistency_mode == 'duq' and bundle.duq_head is None:
            raise IncompatibilityError("bundle lacks DUQ head")
        if self.semantics_mode == 'lso':
            self.selected_taps(bundle)

    def selected_taps(self, bundle: TrainedBundle) -> List[int]:
        """Indices of the taps used by LSO."""
        names = bundle.tap_names
        chosen = names if self.lso_taps is None else list(self.lso_taps)
        if not chosen:
            raise ConfigError("LSO needs at least one tap")
        unknown = [t for t in chosen if t not in names]
        if unknown:
            raise ConfigError(f"unknown taps {unknown}; classifier declares {names}")
        return [names.index(t) for t in chosen]

    def resolve_s_star(self, bundle: TrainedBundle) -> float:
        if self.s_star is not None:
            return float(self.s_star)
        if 'mean' not in bundle.train_loss_stats:
            raise ConfigError("s_star is 'auto' but the bundle has no training loss statistics")
        return float(bundle.train_loss_stats['mean'])


@dataclass
class LossBreakdown:
    """Unweighted and weighted terms of one objective evaluation."""

    terms: Dict[str, float] = field(default_factory=dict)
    weighted: Dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    logits: Optional[torch.Tensor] = None


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _lso_from_taps(bar_taps: Sequence[torch.Tensor], query_taps: Sequence[torch.Tensor],
                   indices: Sequence[int]) -> torch.Tensor:
    # per-tap squared error divided by the tap's feature count
    return sum(F.mse_loss(bar_taps[i], query_taps[i], reduction='mean') for i in indices)


@torch.no_grad()
def query_features(bundle: TrainedBundle, x: torch.Tensor) -> List[torch.Tensor]:
    """Classifier taps of the query, computed once and held constant."""
    bundle.classifier.eval()
    return [t.detach() for t in bundle.classifier.forward_with_taps(_batched(x))[1]]


def semantics_loss(
    x_bar: torch.Tensor,
    x: torch.Tensor,
    bundle: TrainedBundle,
    spec: ObjectiveSpec,
    query_taps: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """Query-counterfactual discrepancy in pixel space (ISO) or tap space (LSO)."""
    x_bar, x = _batched(x_bar), _batched(x)
    if x_bar.shape != x.shape:
        raise ConfigError(f"x_bar and x differ in shape: {tuple(x_bar.shape)} vs {tuple(x.shape)}")
    if spec.semantics_mode == 'iso':
        return F.mse_loss(x_bar, x)
    indices = spec.selected_taps(bundle)
    if query_taps is None:
        query_taps = query_features(bundle, x)
    _, bar_taps = bundle.classifier.forward_with_taps(x_bar)
    return _lso_from_taps(bar_taps, query_taps, indices)


def dep_margin(shat: torch.Tensor, s_star: float) -> torch.Tensor:
    """|G(x_bar) - s*| averaged over the batch."""
    return (shat - s_star).abs().mean()


def duq_hinge(k_source: torch.Tensor, k_target: torch.Tensor, tau: float) -> torch.Tensor:
    """max(K_source - K_target + tau, 0) averaged over the batch."""
    return torch.clamp(torch.as_tensor(k_source) - torch.as_tensor(k_target) + tau, min=0.0).mean()


def mc_loss_dep(x_bar: torch.Tensor, bundle: TrainedBundle, s_star: float) -> torch.Tensor:
    """DEP manifold consistency: the predicted loss should match the target loss s*.

    Raises:
        IncompatibilityError: If the bundle has no loss predictor
    """
    if bundle.loss_predictor is None:
        raise IncompatibilityError("bundle lacks loss predictor")
    _, taps = bundle.classifier.forward_with_taps(_batched(x_bar))
    return dep_margin(bundle.loss_predictor(taps), s_star)


def mc_loss_duq(x_bar: torch.Tensor, bundle: TrainedBundle, target: TargetSpec, tau: float) -> torch.Tensor:
    """DUQ manifold consistency: kernel similarity to the target centroid should
    exceed that to the source centroid by at least tau.

    Raises:
        IncompatibilityError: If the bundle has no DUQ head
    """
    if bundle.duq_head is None:
        raise IncompatibilityError("bundle lacks DUQ head")
    kernel = bundle.duq_head.kernel_similarity(bundle.classifier.features(_batched(x_bar)))
    return duq_hinge(kernel[:, target.source_label], kernel[:, target.target_label], tau)


def fc_loss(logits: torch.Tensor, target: TargetSpec) -> torch.Tensor:
    """Cross-entropy of softmax(logits) against the target label."""
    logits = logits.unsqueeze(0) if logits.dim() == 1 else logits
    labels = torch.full((logits.shape[0],), target.target_label, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, labels)


def total_objective(
    x_bar: torch.Tensor,
    x: torch.Tensor,
    bundle: TrainedBundle,
    spec: ObjectiveSpec,
    target: TargetSpec,
    query_taps: Optional[Sequence[torch.Tensor]] = None,
    apply_regularizers: bool = False,
):
    """Evaluate lambda1 * semantics + lambda2 * mc + lambda3 * fc (+ TV / l2 on pixel priors).

    The classifier runs once on x_bar; every term reuses that forward pass.

    Returns:
        Tuple of (total loss tensor, LossBreakdown)
    """
    x_bar, x = _batched(x_bar), _batched(x)
    if x_bar.shape != x.shape:
        raise ConfigError(f"x_bar and x differ in shape: {tuple(x_bar.shape)} vs {tuple(x.shape)}")
    logits, taps = bundle.classifier.forward_with_taps(x_bar)

    if spec.semantics_mode == 'iso':
        sem = F.mse_loss(x_bar, x)
    else:
        if query_taps is None:
            query_taps = query_features(bundle, x)
        sem = _lso_from_taps(taps, query_taps, spec.selected_taps(bundle))

    if spec.consistency_mode == 'dep':
        if bundle.loss_predictor is None:
            raise IncompatibilityError("bundle lacks loss predictor")
        mc = dep_margin(bundle.loss_predictor(taps), spec.resolve_s_star(bundle))
    elif spec.consistency_mode == 'duq':
        if bundle.duq_head is None:
            raise IncompatibilityError("bundle lacks DUQ head")
        kernel = bundle.duq_head.kernel_similarity(bundle.classifier.pool(taps[-1]))
        mc = duq_hinge(kernel[:, target.source_label], kernel[:, target.target_label], spec.tau)
    else:
        mc = x_bar.new_zeros(())

    fc = fc_loss(logits, target)

    terms = {'semantics': sem, 'mc': mc, 'fc': fc}
    weights = {'semantics': spec.lambda1, 'mc': spec.lambda2, 'fc': spec.lambda3}
    if apply_regularizers:
        terms['tv'] = tv_norm(x_bar)
        terms['l2'] = l2_norm(x_bar)
        weights['tv'] = spec.tv_weight
        weights['l2'] = spec.l2_weight

    weighted = {name: weights[name] * value for name, value in terms.items()}
    total = sum(weighted.values())
    breakdown = LossBreakdown(
        terms={name: float(value.detach()) for name, value in terms.items()},
        weighted={name: float(value.detach()) for name, value in weighted.items()},
        total=float(total.detach()),
        logits=logits.detach(),
    )
    return total, breakdown
