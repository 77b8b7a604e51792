"""Accuracy metrics over the four probe families, plus the mono baseline.

Answers are single tokens, so each probe contributes one indicator: the
prediction either hits the expected token or it does not.  Efficacy scores
the edited requests against their new tokens, generalization the rephrases,
specificity the unrelated preserved facts against their original tokens, and
portability the one-hop probes against the new tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import merging, model as model_core, solvers
from .covariance import PER_LANGUAGE
from .errors import ShapeError


@dataclass(frozen=True)
class MetricsRow:
    """The four accuracies for one language; ``averaged`` is their mean."""

    efficacy: float
    generalization: float
    specificity: float
    portability: float

    def __post_init__(self):
        for name in ("efficacy", "generalization", "specificity", "portability"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ShapeError(f"{name} must lie in [0, 1], got {value}")
            object.__setattr__(self, name, value)

    @property
    def averaged(self):
        return (self.efficacy + self.generalization + self.specificity + self.portability) / 4

    def as_dict(self):
        return {
            "efficacy": self.efficacy,
            "generalization": self.generalization,
            "specificity": self.specificity,
            "portability": self.portability,
            "averaged": self.averaged,
        }


@dataclass(frozen=True)
class MetricsReport:
    """Per-language rows plus run metadata; rows align with ``languages``."""

    method: str
    cov_mode: str
    alpha: float
    rank_ratio: float | None
    seed: int
    languages: tuple[str, ...]
    rows: tuple[MetricsRow, ...]

    def __post_init__(self):
        if len(self.rows) != len(self.languages):
            raise ShapeError("one metrics row per language required")

    def mean_row(self):
        """Cross-language mean of each accuracy."""
        return MetricsRow(
            efficacy=float(np.mean([r.efficacy for r in self.rows])),
            generalization=float(np.mean([r.generalization for r in self.rows])),
            specificity=float(np.mean([r.specificity for r in self.rows])),
            portability=float(np.mean([r.portability for r in self.rows])),
        )

    def to_json_dict(self):
        return {
            "method": self.method,
            "cov_mode": self.cov_mode,
            "alpha": self.alpha,
            "rank_ratio": self.rank_ratio,
            "seed": self.seed,
            "languages": list(self.languages),
            "per_language": {
                lang: row.as_dict() for lang, row in zip(self.languages, self.rows)
            },
            "mean": self.mean_row().as_dict(),
        }


def accuracy(model, inputs, expected):
    """Fraction of probe columns whose prediction equals the expected token."""
    expected = np.asarray(expected)
    if expected.size == 0:
        raise ShapeError("accuracy needs at least one probe")
    predictions = model_core.predict_batch(model, inputs)
    return float(np.mean(predictions == expected))


def evaluate(model, dataset, language_id):
    """All four accuracies for one language."""
    return MetricsRow(
        efficacy=accuracy(model, dataset.request_inputs(language_id), dataset.new_tokens),
        generalization=accuracy(model, dataset.rephrase_inputs(language_id), dataset.new_tokens),
        specificity=accuracy(
            model, dataset.unrelated_inputs(language_id), dataset.unrelated_expected(language_id)
        ),
        portability=accuracy(model, dataset.hop_inputs(language_id), dataset.new_tokens),
    )


def evaluate_all(model, dataset):
    """Rows for every language, ascending language order."""
    return tuple(evaluate(model, dataset, i) for i in range(dataset.m_languages))


def run_mono(
    model,
    dataset,
    language_id,
    method=solvers.METHOD_MEMIT,
    lam=None,
    alpha=1.0,
    rel_tol=solvers.DEFAULT_REL_TOL,
    cond_limit=solvers.DEFAULT_COND_LIMIT,
):
    """Edit with a single language and evaluate in that language.

    This is exactly the m=1 merge pipeline: solve per-language deltas for the
    one language, sum-merge them (a no-op for m=1), scale by ``alpha``, apply,
    evaluate.
    """
    delta_set = solvers.edit_model(
        model,
        [dataset.language_requests(language_id)],
        dataset.preserved_inputs_all(),
        method=method,
        cov_mode=PER_LANGUAGE,
        lam=lam,
        rel_tol=rel_tol,
        cond_limit=cond_limit,
        preserved_ids=dataset.preserved_fact_ids(),
        request_ids=dataset.request_fact_ids(),
    )
    merged = {
        layer: merging.merge_sum(
            delta_set.layer_deltas(layer), layer=layer, language_ids=delta_set.language_ids
        )
        for layer in delta_set.layers
    }
    edited = merging.apply_update(model, merged, alpha)
    return evaluate(edited, dataset, language_id)
