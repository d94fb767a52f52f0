"""Deployment, channel and signal synthesis for the grant-free uplink.

Each AP ``l`` receives ``[Yp_l, Y_l] = H_l U [Xp, X] + [Vp_l, V_l]``: a
pilot block of length ``pilot_length`` followed by ``data_length`` data
symbols.  Users share orthogonal pilot sequences in groups of
``users_per_pilot``.  Correlating the pilot block with the conjugate of a
group's sequence ("despreading") leaves the sum of that group's active
channels plus white noise.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from gfcf.exceptions import ContractViolation
from gfcf.gaussian import cholesky


def dbm_to_watt(dbm):
    if dbm == -math.inf:
        return 0.0
    return 10.0 ** ((dbm - 30.0) / 10.0)


def qam_constellation(order, power):
    """Square QAM (or BPSK for order 2) with zero mean and average power ``power``."""
    if order == 2:
        points = np.array([1.0, -1.0], dtype=complex)
    else:
        side = int(round(math.sqrt(order)))
        if side * side != order:
            raise ContractViolation(f"unsupported QAM order {order}")
        levels = np.arange(-(side - 1), side, 2, dtype=float)
        points = (levels[:, None] + 1j * levels[None, :]).reshape(-1)
    points = points / np.sqrt(np.mean(np.abs(points) ** 2))
    return points * np.sqrt(power)


_MODULATIONS = {"bpsk": 2, "4qam": 4, "qpsk": 4, "16qam": 16}


@dataclass(frozen=True)
class ScenarioConfig:
    """Deployment, power and frame parameters.

    Powers are given in dBm and exposed in watts through `sigma_x2` and
    `sigma_v2`.  ``sigma_v2_dbm = -inf`` gives a noiseless link.
    """

    area_side: float = 400.0
    n_aps: int = 16
    n_antennas: int = 2
    n_users: int = 16
    pilot_length: int = 8
    data_length: int = 20
    sigma_x2_dbm: float = 14.0
    sigma_v2_dbm: float = -96.0
    ap_height: float = 10.0
    pathloss_const: float = -30.5
    pathloss_slope: float = 36.7
    modulation: str = "4qam"
    activity_prob: float = 0.5
    users_per_pilot: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if self.modulation not in _MODULATIONS:
            raise ContractViolation(f"unknown modulation {self.modulation!r}")
        if self.users_per_pilot < 1 or self.n_users % self.users_per_pilot:
            raise ContractViolation("n_users must be a multiple of users_per_pilot")
        if self.pilot_length < self.n_groups:
            raise ContractViolation("pilot_length must be >= number of pilot groups")
        if min(self.n_aps, self.n_antennas, self.n_users, self.pilot_length) < 1:
            raise ContractViolation("counts must be positive")
        if self.data_length < 0:
            raise ContractViolation("data_length must be >= 0")
        if not 0.0 <= self.activity_prob <= 1.0:
            raise ContractViolation("activity_prob must lie in [0, 1]")
        if self.sigma_x2 <= 0:
            raise ContractViolation("sigma_x2 must be positive")

    @property
    def sigma_x2(self):
        return dbm_to_watt(self.sigma_x2_dbm)

    @property
    def sigma_v2(self):
        return dbm_to_watt(self.sigma_v2_dbm)

    @property
    def n_groups(self):
        return self.n_users // self.users_per_pilot

    @property
    def pilot_noise_var(self):
        return self.sigma_v2 / (self.pilot_length * self.sigma_x2)

    @property
    def constellation(self):
        return qam_constellation(_MODULATIONS[self.modulation], self.sigma_x2)

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return ScenarioConfig(**data)

    @classmethod
    def small(cls, **overrides):
        """Two APs, four users sharing two pilots, eight data symbols."""
        base = dict(
            area_side=100.0,
            n_aps=2,
            n_antennas=2,
            n_users=4,
            pilot_length=2,
            data_length=8,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def pathloss_variance(distance, const_db=-30.5, slope_db=36.7):
    """Per-antenna channel variance ``10^((const - slope log10 d) / 10)``, d in meters."""
    d = np.asarray(distance, dtype=float)
    if np.any(d <= 0):
        raise ContractViolation("distance must be positive")
    out = 10.0 ** ((const_db - slope_db * np.log10(d)) / 10.0)
    return float(out) if out.ndim == 0 else out


def ap_positions(config):
    """APs on a square grid spanning the area, corners included, at ``ap_height``.

    Sixteen APs give the 4x4 grid ``{(side*i/3, side*j/3)}``.  Other counts
    fill the smallest square grid that holds them in row-major order.
    """
    n_side = math.ceil(math.sqrt(config.n_aps))
    if n_side == 1:
        coords = [config.area_side / 2.0]
    else:
        coords = [config.area_side * i / (n_side - 1) for i in range(n_side)]
    grid = [(x, y) for x in coords for y in coords][: config.n_aps]
    pos = np.array(grid, dtype=float)
    return np.column_stack([pos, np.full(config.n_aps, config.ap_height)])


def draw_ut_positions(config, rng):
    return rng.uniform(0.0, config.area_side, size=(config.n_users, 2))


def pilot_book(config):
    """First ``n_groups`` rows of a DFT matrix scaled to squared norm ``P sigma_x2``."""
    P = config.pilot_length
    g = np.arange(config.n_groups)[:, None]
    p = np.arange(P)[None, :]
    return np.sqrt(config.sigma_x2) * np.exp(-2j * np.pi * g * p / P)


def check_orthogonal(book, rtol=1e-9):
    gram = book @ book.conj().T
    off = gram - np.diag(np.diag(gram))
    if np.max(np.abs(off), initial=0.0) > rtol * np.max(np.abs(np.diag(gram))):
        raise ContractViolation("pilot sequences are not mutually orthogonal")


def despread(Yp_l, book, group, sigma_x2):
    """Equivalent pilot observation of one group at one AP: ``Yp_l conj(x_g) / (P sigma_x2)``."""
    P = book.shape[1]
    return Yp_l @ np.conj(book[group]) / (P * sigma_x2)


def despread_all(Yp, book, sigma_x2):
    """Despread every group at every AP; returns shape ``(n_aps, n_groups, N)``."""
    P = book.shape[1]
    return np.einsum("lnp,gp->lgn", Yp, np.conj(book)) / (P * sigma_x2)


def _crandn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


@dataclass
class Realization:
    """One drawn world.

    Array layouts: ``xi`` ``(L, K, N, N)``, ``H_true`` ``(L, N, K)``,
    ``Xp`` ``(K, P)``, ``X_true`` ``(K, T)``, ``Yp`` ``(L, N, P)``,
    ``Y`` ``(L, N, T)``, ``pilot_book`` ``(G, P)``, ``user_group`` ``(K,)``.
    """

    config: ScenarioConfig
    ap_positions: np.ndarray
    ut_positions: np.ndarray
    xi: np.ndarray
    u_true: np.ndarray
    H_true: np.ndarray
    pilot_book: np.ndarray
    user_group: np.ndarray
    Xp: np.ndarray
    X_true: np.ndarray
    Yp: np.ndarray
    Y: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def pilot_groups(self):
        return [np.flatnonzero(self.user_group == g) for g in range(self.pilot_book.shape[0])]

    def despread(self):
        return despread_all(self.Yp, self.pilot_book, self.config.sigma_x2)


def channel_covariances(config, ap_pos, ut_pos):
    d = np.sqrt(
        np.sum((ap_pos[:, None, :2] - ut_pos[None, :, :]) ** 2, axis=-1)
        + ap_pos[:, None, 2] ** 2
    )
    beta = pathloss_variance(d, config.pathloss_const, config.pathloss_slope)
    eye = np.eye(config.n_antennas)
    return np.asarray(beta)[..., None, None] * eye


def generate_realization(config, seed, ut_positions=None, u_true=None):
    """Draw positions (unless given), pilots, activity, channels, symbols and noise.

    ``seed`` is anything `numpy.random.default_rng` accepts.  The draw order
    is fixed, so ``(config, seed)`` determines the result bit for bit.
    ``u_true`` overrides the Bernoulli activity draw (the draw still happens
    so the remaining streams are unchanged).
    """
    rng = np.random.default_rng(seed)
    L, N, K = config.n_aps, config.n_antennas, config.n_users
    P, T = config.pilot_length, config.data_length
    aps = ap_positions(config)
    drawn_pos = draw_ut_positions(config, rng)
    ut = drawn_pos if ut_positions is None else np.asarray(ut_positions, dtype=float)

    perm = rng.permutation(K)
    user_group = np.empty(K, dtype=int)
    user_group[perm] = np.arange(K) // config.users_per_pilot
    act = (rng.random(K) < config.activity_prob).astype(int)
    if u_true is not None:
        act = np.asarray(u_true, dtype=int).copy()

    xi = channel_covariances(config, aps, ut)
    root = cholesky(xi)
    w = _crandn(rng, (L, K, N))
    H = np.einsum("lkij,lkj->lik", root, w)

    book = pilot_book(config)
    check_orthogonal(book)
    Xp = book[user_group]
    const = config.constellation
    X = const[rng.integers(0, const.size, size=(K, T))]

    sv = math.sqrt(config.sigma_v2)
    Vp = sv * _crandn(rng, (L, N, P))
    V = sv * _crandn(rng, (L, N, T))
    HU = H * act[None, None, :]
    Yp = HU @ Xp + Vp
    Y = HU @ X + V
    return Realization(
        config=config,
        ap_positions=aps,
        ut_positions=ut,
        xi=xi,
        u_true=act,
        H_true=H,
        pilot_book=book,
        user_group=user_group,
        Xp=Xp,
        X_true=X,
        Yp=Yp,
        Y=Y,
    )


_ARRAY_KEYS = (
    "ap_positions", "ut_positions", "xi", "u_true", "H_true",
    "pilot_book", "user_group", "Xp", "X_true", "Yp", "Y",
)


def save_realization(path, real):
    """Write a realization to ``.npz``; arrays are little-endian, C order.

    The config is stored as a JSON string under ``config``.
    """
    arrays = {}
    for key in _ARRAY_KEYS:
        a = np.ascontiguousarray(getattr(real, key))
        arrays[key] = a.astype(a.dtype.newbyteorder("<"))
    arrays["config"] = np.array(json.dumps(asdict(real.config)))
    np.savez(path, **arrays)


def load_realization(path):
    with np.load(path, allow_pickle=False) as data:
        config = ScenarioConfig(**json.loads(str(data["config"])))
        kwargs = {key: data[key] for key in _ARRAY_KEYS}
    return Realization(config=config, **kwargs)
