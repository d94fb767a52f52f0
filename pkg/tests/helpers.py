import numpy as np

from gfcf.model import PrunedModel
from gfcf.scenario import qam_constellation


def make_model(xi, user_group, y_pilot, Y, sigma_x2=1.0, sigma_v2=1.0, pilot_noise_var=1.0, n_groups=None):
    """Hand-built receiver model; ``xi`` may be given as (L, K) scalars for N = 1."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 2:
        xi = xi[..., None, None]
    user_group = np.asarray(user_group, dtype=int)
    n_groups = int(user_group.max()) + 1 if n_groups is None else n_groups
    return PrunedModel(
        xi=xi.astype(complex),
        user_group=user_group,
        n_groups=n_groups,
        y_pilot=np.asarray(y_pilot, dtype=complex),
        Y=np.asarray(Y, dtype=complex),
        sigma_x2=sigma_x2,
        sigma_v2=sigma_v2,
        pilot_noise_var=pilot_noise_var,
        constellation=qam_constellation(4, sigma_x2),
        index_map=np.arange(user_group.size),
    )
