"""What the receiver knows: statistics, despread pilots and data, per user subset."""

from dataclasses import dataclass, replace

import numpy as np

from gfcf.exceptions import ContractViolation


@dataclass(frozen=True)
class PrunedModel:
    """Receiver view restricted to a subset of users.

    ``xi`` is ``(L, K, N, N)``; ``user_group`` gives each retained user's
    pilot group (global group ids, so groups may be empty after pruning);
    ``y_pilot`` is the despread pilot observation ``(L, G, N)``; ``Y`` is
    the data block ``(L, N, T)``; ``index_map[k]`` is the global user id of
    column ``k``.
    """

    xi: np.ndarray
    user_group: np.ndarray
    n_groups: int
    y_pilot: np.ndarray
    Y: np.ndarray
    sigma_x2: float
    sigma_v2: float
    pilot_noise_var: float
    constellation: np.ndarray
    index_map: np.ndarray

    @property
    def n_users(self):
        return self.xi.shape[1]

    @property
    def n_aps(self):
        return self.Y.shape[0]

    @property
    def n_antennas(self):
        return self.Y.shape[1]

    @property
    def data_length(self):
        return self.Y.shape[2]

    def group_members(self, g):
        return np.flatnonzero(self.user_group == g)


def check_model(model):
    """Validate shapes and finiteness of a `PrunedModel`; returns it unchanged."""
    L, N, T = model.Y.shape
    K = model.user_group.shape[0]
    if model.xi.shape != (L, K, N, N):
        raise ContractViolation(f"xi has shape {model.xi.shape}, expected {(L, K, N, N)}")
    if model.y_pilot.shape != (L, model.n_groups, N):
        raise ContractViolation("y_pilot shape does not match (L, G, N)")
    if model.index_map.shape != (K,):
        raise ContractViolation("index_map must have one entry per user")
    if K and (model.user_group.min() < 0 or model.user_group.max() >= model.n_groups):
        raise ContractViolation("user_group out of range")
    for name in ("xi", "y_pilot", "Y"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise ContractViolation(f"{name} has non-finite entries")
    if model.sigma_x2 <= 0 or model.sigma_v2 < 0 or model.pilot_noise_var < 0:
        raise ContractViolation("powers must be non-negative (sigma_x2 positive)")
    return model


def receiver_model(real):
    """Full (unpruned) receiver view of a `Realization`."""
    cfg = real.config
    return PrunedModel(
        xi=real.xi,
        user_group=np.asarray(real.user_group),
        n_groups=real.pilot_book.shape[0],
        y_pilot=real.despread(),
        Y=real.Y,
        sigma_x2=cfg.sigma_x2,
        sigma_v2=cfg.sigma_v2,
        pilot_noise_var=cfg.pilot_noise_var,
        constellation=cfg.constellation,
        index_map=np.arange(cfg.n_users),
    )


def prune(u_hat, model):
    """Keep only users flagged active in ``u_hat``.

    ``model`` may be a `PrunedModel` or a `Realization`.  ``K = sum(u_hat)``;
    ``K = 0`` yields a valid empty model.
    """
    if not isinstance(model, PrunedModel):
        model = receiver_model(model)
    u = np.asarray(u_hat).astype(bool)
    if u.shape != (model.n_users,):
        raise ContractViolation("u_hat length must equal the number of users")
    keep = np.flatnonzero(u)
    return replace(
        model,
        xi=model.xi[:, keep],
        user_group=model.user_group[keep],
        index_map=model.index_map[keep],
    )
