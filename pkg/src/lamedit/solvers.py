"""Closed-form editing solvers and the batch editing driver.

Both solvers compute a perturbation of a layer's down-projection that maps
request keys onto target values while limiting damage to preserved keys:

* ``solve_memit`` solves the ridge-style normal equations, weighting the
  preserved second moment by ``lam``.
* ``solve_alphaedit`` first projects onto the null space of the preserved
  second moment, so preserved keys are (numerically) untouched, and uses
  ``lam`` as a plain Tikhonov term.

``edit_model`` runs either solver over every edit layer in bottom-to-top
order for every language, recomputing keys and targets on per-language
working copies, and returns all per-(layer, language) perturbations relative
to the original weights.  The input model is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from . import covariance as cov_mod
from . import model as model_core
from .covariance import PER_LANGUAGE, SHARED
from .errors import IllConditionedError, ShapeError

METHOD_MEMIT = "memit"
METHOD_ALPHAEDIT = "alphaedit"
METHODS = (METHOD_MEMIT, METHOD_ALPHAEDIT)

DEFAULT_LAM_MEMIT = 2.75
DEFAULT_LAM_ALPHAEDIT = 0.1
DEFAULT_REL_TOL = 1e-6
DEFAULT_COND_LIMIT = 1e12


@dataclass(frozen=True)
class DeltaMatrix:
    """One layer's weight perturbation for one language."""

    layer: int
    language_id: int
    delta: np.ndarray  # (d, h)
    method: str
    cov_mode: str

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=float)
        if delta.ndim != 2:
            raise ShapeError("delta must be a matrix")
        if not np.all(np.isfinite(delta)):
            raise ShapeError("delta contains non-finite entries")
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class NullProjector:
    """Orthogonal projector onto the null space of a preserved second moment."""

    projector: np.ndarray  # (h, h)
    rel_tol: float
    null_dim: int

    def __post_init__(self):
        proj = np.asarray(self.projector, dtype=float)
        if proj.ndim != 2 or proj.shape[0] != proj.shape[1]:
            raise ShapeError("projector must be square")
        object.__setattr__(self, "projector", proj)


@dataclass(frozen=True)
class LanguageRequests:
    """One language's edit batch: inputs column-wise plus target tokens."""

    language_id: int
    inputs: np.ndarray  # (d, n)
    new_tokens: np.ndarray  # (n,)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        tokens = np.asarray(self.new_tokens)
        if inputs.ndim != 2 or inputs.shape[1] != tokens.shape[0] or tokens.ndim != 1:
            raise ShapeError("inputs must be (d, n) matching n new_tokens")
        if inputs.shape[1] < 1:
            raise ShapeError("request batch must be nonempty")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "new_tokens", tokens.astype(np.int64))

    @property
    def n(self):
        return self.inputs.shape[1]


@dataclass(frozen=True)
class DeltaSet:
    """All per-(layer, language) perturbations from one editing run."""

    method: str
    cov_mode: str
    layers: tuple[int, ...]
    language_ids: tuple[int, ...]
    entries: dict

    def delta(self, layer, language_id):
        return self.entries[(layer, language_id)]

    def layer_deltas(self, layer):
        """Delta matrices of one layer in ascending language order."""
        return [self.entries[(layer, lang)].delta for lang in self.language_ids]


def _condition_estimate(matrix):
    try:
        return float(np.linalg.cond(matrix))
    except np.linalg.LinAlgError:
        return float("inf")


def solve_memit(w_out, keys, targets, cov_preserved, cov_request, lam, cond_limit=DEFAULT_COND_LIMIT):
    """Ridge-style closed-form edit of one layer.

    Solves ``delta @ (lam * cov_preserved + cov_request) = residual @ keys.T``
    with ``residual = targets - w_out @ keys`` via a symmetric factorization;
    the system matrix is never inverted explicitly.

    Parameters
    ----------
    w_out : ndarray (d, h)
    keys : ndarray (h, n)
    targets : ndarray (d, n)
    cov_preserved, cov_request : ndarray (h, h)
        Caller applies any sample-count normalization to ``cov_preserved``.
    lam : float
        Preserved-term weight, >= 0.  With ``lam == 0`` the system must be
        invertible on its own.

    Returns
    -------
    DeltaMatrix with layer/language unset (-1); drivers stamp them.
    """
    w_out = np.asarray(w_out, dtype=float)
    keys = np.asarray(keys, dtype=float)
    targets = np.asarray(targets, dtype=float)
    d, h = w_out.shape
    if keys.shape[0] != h or targets.shape != (d, keys.shape[1]):
        raise ShapeError(
            f"inconsistent shapes: w_out {w_out.shape}, keys {keys.shape}, targets {targets.shape}"
        )
    if lam < 0:
        raise ShapeError("lam must be nonnegative")
    cov_preserved = np.asarray(cov_preserved, dtype=float)
    cov_request = np.asarray(cov_request, dtype=float)
    if cov_preserved.shape != (h, h) or cov_request.shape != (h, h):
        raise ShapeError("covariance matrices must be (h, h)")

    residual = targets - w_out @ keys
    system = lam * cov_preserved + cov_request
    system = 0.5 * (system + system.T)
    cond = _condition_estimate(system)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditionedError(
            f"normal-equation system condition {cond:.3e} exceeds limit {cond_limit:.1e}",
            condition_estimate=cond,
        )
    rhs = keys @ residual.T  # (h, d)
    try:
        solved = scipy.linalg.solve(system, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        try:
            solved = scipy.linalg.solve(system, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise IllConditionedError(
                f"normal-equation solve failed: {exc}", condition_estimate=cond
            ) from exc
    return DeltaMatrix(
        layer=-1, language_id=-1, delta=solved.T, method=METHOD_MEMIT, cov_mode=PER_LANGUAGE
    )


def nullspace_projector(cov_preserved, rel_tol=DEFAULT_REL_TOL):
    """Projector onto the span of eigenvectors with relatively tiny eigenvalues.

    Eigenvalues at or below ``rel_tol`` times the largest eigenvalue count as
    zero.  A zero matrix yields the identity (everything is null space); a
    full-rank matrix yields the zero projector.
    """
    cov = np.asarray(cov_preserved, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError("covariance must be square")
    scale = np.linalg.norm(cov)
    if scale > 0 and np.linalg.norm(cov - cov.T) > 1e-9 * scale:
        raise ShapeError("covariance is not symmetric")
    h = cov.shape[0]
    if scale == 0.0:
        return NullProjector(projector=np.eye(h), rel_tol=float(rel_tol), null_dim=h)
    eigvals, eigvecs = np.linalg.eigh(0.5 * (cov + cov.T))
    top = eigvals[-1]
    if top <= 0:
        return NullProjector(projector=np.eye(h), rel_tol=float(rel_tol), null_dim=h)
    mask = eigvals <= rel_tol * top
    basis = eigvecs[:, mask]
    proj = basis @ basis.T
    proj = 0.5 * (proj + proj.T)
    return NullProjector(projector=proj, rel_tol=float(rel_tol), null_dim=int(mask.sum()))


def solve_alphaedit(w_out, keys, targets, projector, cov_request, lam, cond_limit=DEFAULT_COND_LIMIT):
    """Null-space constrained closed-form edit of one layer.

    Solves ``delta @ (lam * I + cov_request @ P) = residual @ keys.T @ P``
    where ``P`` projects onto the null space of the preserved second moment.
    Because ``P (lam I + cov_request P)^{-1} = (lam I + P cov_request)^{-1} P``
    the result carries a trailing factor of ``P``, so preserved keys map to
    (numerically) zero under the perturbation.
    """
    w_out = np.asarray(w_out, dtype=float)
    keys = np.asarray(keys, dtype=float)
    targets = np.asarray(targets, dtype=float)
    d, h = w_out.shape
    if keys.shape[0] != h or targets.shape != (d, keys.shape[1]):
        raise ShapeError(
            f"inconsistent shapes: w_out {w_out.shape}, keys {keys.shape}, targets {targets.shape}"
        )
    if lam < 0:
        raise ShapeError("lam must be nonnegative")
    proj = projector.projector
    if proj.shape != (h, h):
        raise ShapeError(f"projector must be (h, h) = ({h}, {h}), got {proj.shape}")
    cov_request = np.asarray(cov_request, dtype=float)
    if cov_request.shape != (h, h):
        raise ShapeError("cov_request must be (h, h)")

    residual = targets - w_out @ keys
    system = lam * np.eye(h) + cov_request @ proj
    cond = _condition_estimate(system)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditionedError(
            f"projected system condition {cond:.3e} exceeds limit {cond_limit:.1e}",
            condition_estimate=cond,
        )
    rhs = proj @ keys @ residual.T  # (h, d)
    try:
        solved = scipy.linalg.solve(system.T, rhs)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise IllConditionedError(
            f"projected solve failed: {exc}", condition_estimate=cond
        ) from exc
    return DeltaMatrix(
        layer=-1, language_id=-1, delta=solved.T, method=METHOD_ALPHAEDIT, cov_mode=PER_LANGUAGE
    )


def edit_model(
    model,
    requests,
    preserved_inputs,
    method=METHOD_MEMIT,
    cov_mode=PER_LANGUAGE,
    lam=None,
    rel_tol=DEFAULT_REL_TOL,
    cond_limit=DEFAULT_COND_LIMIT,
    preserved_ids=None,
    request_ids=None,
):
    """One-step batch edit over all edit layers and languages.

    Per-language perturbations are computed against the original weights:
    each language gets its own working copy that accumulates only its own
    lower-layer edits, which is what makes the resulting per-language deltas
    independently mergeable.  Preserved statistics are computed once per
    layer on the unedited model.

    Parameters
    ----------
    requests : sequence of LanguageRequests
        One entry per language; language ids must be unique.
    preserved_inputs : ndarray (d, p)
        Inputs whose predictions the edit should leave alone, pooled over
        languages.  May be empty only for the alphaedit method.
    cov_mode : "per_language" | "shared"
        Whether each language's request covariance is its own or the sum
        across all languages.
    lam : float, optional
        Defaults to 2.75 (memit) or 0.1 (alphaedit).  For memit the preserved
        moment is normalized per sample and rescaled to the request batch
        size before weighting, so lam expresses the preservation-to-request
        ratio regardless of either sample count.

    Returns
    -------
    DeltaSet
    """
    if method not in METHODS:
        raise ShapeError(f"unknown method {method!r}")
    if cov_mode not in cov_mod.COV_MODES:
        raise ShapeError(f"unknown covariance mode {cov_mode!r}")
    requests = list(requests)
    if not requests:
        raise ShapeError("edit_model needs at least one language batch")
    requests.sort(key=lambda req: req.language_id)
    language_ids = tuple(req.language_id for req in requests)
    if len(set(language_ids)) != len(language_ids):
        raise ShapeError(f"duplicate language ids in requests: {language_ids}")
    if lam is None:
        lam = DEFAULT_LAM_MEMIT if method == METHOD_MEMIT else DEFAULT_LAM_ALPHAEDIT

    entries = {}
    working = {req.language_id: model for req in requests}
    for layer in model.edit_layers:
        stats, _ = cov_mod.const_stats(
            model, preserved_inputs, layer, preserved_ids=preserved_ids, request_ids=request_ids
        )
        if method != METHOD_MEMIT:
            projector = nullspace_projector(stats.cov, rel_tol=rel_tol)

        key_batches = [
            cov_mod.request_keys(working[req.language_id], req.language_id, req.inputs, layer)
            for req in requests
        ]
        shared = cov_mod.cov_shared(key_batches).cov if cov_mode == SHARED else None
        if method == METHOD_MEMIT:
            # Per-sample preserved moment rescaled to the request batch size,
            # so lam weighs preservation against requests independently of
            # how many keys went into either statistic.
            request_count = sum(kb.n for kb in key_batches) if cov_mode == SHARED else None
            per_sample = stats.cov / max(stats.sample_count, 1)

        for req, kb in zip(requests, key_batches):
            lang = req.language_id
            current = working[lang]
            targets = model_core.compute_target_values(current, req.inputs, req.new_tokens, layer)
            cov_request = shared if shared is not None else cov_mod.cov_per_language(kb).cov
            w_out = current.layer(layer).w_out
            if method == METHOD_MEMIT:
                preserved_term = per_sample * (request_count if request_count is not None else kb.n)
                dm = solve_memit(
                    w_out, kb.keys, targets, preserved_term, cov_request, lam, cond_limit=cond_limit
                )
            else:
                dm = solve_alphaedit(
                    w_out, kb.keys, targets, projector, cov_request, lam, cond_limit=cond_limit
                )
            dm = replace(dm, layer=layer, language_id=lang, method=method, cov_mode=cov_mode)
            entries[(layer, lang)] = dm
            working[lang] = current.with_w_out(layer, w_out + dm.delta)

    return DeltaSet(
        method=method,
        cov_mode=cov_mode,
        layers=tuple(model.edit_layers),
        language_ids=language_ids,
        entries=entries,
    )
