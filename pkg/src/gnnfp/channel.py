"""Multi-cell downlink scenario generation.

Seven-hexagon layouts (or any L on the same template), uniform user drops,
log-distance path loss with lognormal shadowing, Rayleigh fading. Channels
are noise-normalized at generation time: every gain is divided by the noise
amplitude so sigma^2 = 1 in all solver equations, which keeps magnitudes
around unity instead of 1e-11.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np


MAGIC = b"GNFP"
FORMAT_VERSION = 1


class InvalidConfig(Exception):
    """Configuration violates a structural invariant."""


@dataclass(frozen=True)
class NetworkConfig:
    """Scenario parameters. Defaults reproduce the benchmark setup:
    7 cells, 6 users each, 8x2 antennas, 0.8 km inter-BS distance,
    20 dBm budget against -90 dBm noise, 8 dB shadowing."""

    L: int = 7
    Q: int = 6
    Nt: int = 8
    Nr: int = 2
    inter_bs_distance_km: float = 0.8
    max_tx_power_dBm: float = 20.0
    noise_power_dBm: float = -90.0
    shadowing_std_dB: float = 8.0
    weights: tuple = ()  # flattened (L*Q,); empty means all ones
    seed: int = 0

    def __post_init__(self):
        if min(self.L, self.Q, self.Nt, self.Nr) < 1:
            raise InvalidConfig("L, Q, Nt, Nr must all be >= 1")
        if self.inter_bs_distance_km <= 0:
            raise InvalidConfig("inter_bs_distance_km must be positive")
        if self.L > 7:
            raise InvalidConfig("layout template covers at most 7 cells")
        w = self.weight_array()
        if w.shape != (self.L, self.Q) or (w < 0).any():
            raise InvalidConfig("weights must be L*Q nonnegative reals")

    def weight_array(self) -> np.ndarray:
        if not self.weights:
            return np.ones((self.L, self.Q))
        return np.asarray(self.weights, dtype=float).reshape(self.L, self.Q)

    @property
    def max_tx_power_W(self) -> float:
        return 10.0 ** ((self.max_tx_power_dBm - 30.0) / 10.0)

    @property
    def noise_amplitude(self) -> float:
        """sqrt of the noise power in watts."""
        return 10.0 ** ((self.noise_power_dBm - 30.0) / 20.0)

    @property
    def hex_circumradius_km(self) -> float:
        # each user is dropped in its serving cell proper: the hexagonal
        # tessellation cell for inter-BS distance D has circumradius D/sqrt(3)
        return self.inter_bs_distance_km / np.sqrt(3.0)


@dataclass
class NetworkInstance:
    """One drop: geometry plus the noise-normalized channel tensor.

    H has shape (L, Q, L, Nr, Nt); H[l, q, i] is the channel from BS i to
    user q of cell l in linear amplitude over the noise amplitude.
    """

    config: NetworkConfig
    H: np.ndarray
    bs_positions: np.ndarray       # (L, 2) km
    user_positions: np.ndarray     # (L, Q, 2) km
    index: int = 0


# user placement keeps this clearance around the serving BS (1 meter)
EXCLUSION_KM = 1e-3


def bs_layout(L: int, inter_bs_distance_km: float) -> np.ndarray:
    """Center cell at the origin, up to six neighbors on the hex ring."""
    d = inter_bs_distance_km
    pts = [(0.0, 0.0)]
    for k in range(6):
        ang = np.pi / 3.0 * k
        pts.append((d * np.cos(ang), d * np.sin(ang)))
    return np.array(pts[:L])


def _inside_hexagon(xy: np.ndarray, a: float) -> np.ndarray:
    """Points inside the flat-top regular hexagon of circumradius a."""
    x = np.abs(xy[:, 0])
    y = np.abs(xy[:, 1])
    return (y <= np.sqrt(3.0) / 2.0 * a) & (np.sqrt(3.0) * x + y <= np.sqrt(3.0) * a)


def draw_shadowing(rng: np.random.Generator, shape, std_dB: float) -> np.ndarray:
    """Lognormal shadowing in its dB form: zero-mean Gaussian, std in dB."""
    return rng.normal(0.0, std_dB, size=shape)


def _sample_users(rng: np.random.Generator, q: int, a: float) -> np.ndarray:
    """Uniform points in the hexagon, outside the BS exclusion radius."""
    out = np.empty((0, 2))
    while out.shape[0] < q:
        cand = rng.uniform(-1.0, 1.0, size=(4 * q, 2)) * [a, np.sqrt(3.0) / 2.0 * a]
        keep = _inside_hexagon(cand, a)
        keep &= np.hypot(cand[:, 0], cand[:, 1]) >= EXCLUSION_KM
        out = np.vstack([out, cand[keep]])
    return out[:q]


def generate_instance(config: NetworkConfig, index: int = 0) -> NetworkInstance:
    """One deterministic drop for (config.seed, index).

    Draw order is fixed: user offsets cell by cell, then shadowing for all
    links, then fading. Path loss is 128.1 + 37.6 log10(r_km) + tau dB with
    tau ~ N(0, shadowing_std^2) per user-BS link.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(index,)))
    L, Q, Nt, Nr = config.L, config.Q, config.Nt, config.Nr
    bs = bs_layout(L, config.inter_bs_distance_km)
    a = config.hex_circumradius_km

    users = np.empty((L, Q, 2))
    for l in range(L):
        users[l] = bs[l] + _sample_users(rng, Q, a)

    tau = draw_shadowing(rng, (L, Q, L), config.shadowing_std_dB)
    fading = (rng.standard_normal((L, Q, L, Nr, Nt))
              + 1j * rng.standard_normal((L, Q, L, Nr, Nt))) / np.sqrt(2.0)

    # distances user (l,q) to BS i, in km
    r = np.linalg.norm(users[:, :, None, :] - bs[None, None, :, :], axis=-1)
    pl_db = 128.1 + 37.6 * np.log10(r) + tau
    amp = 10.0 ** (-pl_db / 20.0) / config.noise_amplitude
    H = fading * amp[:, :, :, None, None]
    return NetworkInstance(config=config, H=H, bs_positions=bs,
                           user_positions=users, index=index)


def generate_batch(config: NetworkConfig, count: int) -> list[NetworkInstance]:
    return [generate_instance(config, i) for i in range(count)]


def mrt_initializer(inst: NetworkInstance) -> np.ndarray:
    """Matched-filter start: sqrt(P/Q) times the dominant right singular
    vector of each direct channel, with a canonical phase so runs are
    reproducible. Per-cell power lands exactly on the budget."""
    cfg = inst.config
    scale = np.sqrt(cfg.max_tx_power_W / cfg.Q)
    v = np.empty((cfg.L, cfg.Q, cfg.Nt), dtype=complex)
    for l in range(cfg.L):
        for q in range(cfg.Q):
            _, _, vh = np.linalg.svd(inst.H[l, q, l])
            u = vh[0].conj()
            anchor = u[np.argmax(np.abs(u))]
            u = u * (anchor.conj() / abs(anchor))
            v[l, q] = scale * u
    return v


# ---------------------------------------------------------------------------
# dataset container: "GNFP" magic, version, config record, instance records


_HEADER = struct.Struct("<4sIIIIIddddQQ")


def save_dataset(path: str, config: NetworkConfig, instances: list[NetworkInstance]):
    """Binary container plus a JSON sidecar manifest (path + '.manifest.json')."""
    weights = config.weight_array()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, config.L, config.Q,
                             config.Nt, config.Nr, config.inter_bs_distance_km,
                             config.max_tx_power_dBm, config.noise_power_dBm,
                             config.shadowing_std_dB, config.seed, len(instances)))
        f.write(weights.astype("<f8").tobytes())
        for inst in instances:
            f.write(inst.bs_positions.astype("<f8").tobytes())
            f.write(inst.user_positions.astype("<f8").tobytes())
            h = np.ascontiguousarray(inst.H)
            f.write(h.astype("<c16").tobytes())  # interleaved re/im doubles
    manifest = {
        "magic": MAGIC.decode(), "format_version": FORMAT_VERSION,
        "L": config.L, "Q": config.Q, "Nt": config.Nt, "Nr": config.Nr,
        "inter_bs_distance_km": config.inter_bs_distance_km,
        "max_tx_power_dBm": config.max_tx_power_dBm,
        "noise_power_dBm": config.noise_power_dBm,
        "shadowing_std_dB": config.shadowing_std_dB,
        "seed": config.seed, "instances": len(instances),
        "bytes": os.path.getsize(path),
    }
    with open(path + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


class BadDatasetFile(Exception):
    """Magic/version mismatch or truncated dataset container."""


def load_dataset(path: str) -> tuple[NetworkConfig, list[NetworkInstance]]:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise BadDatasetFile("truncated header")
        (magic, version, L, Q, Nt, Nr, dist, pdbm, ndbm, shad,
         seed, count) = _HEADER.unpack(head)
        if magic != MAGIC:
            raise BadDatasetFile(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise BadDatasetFile(f"unsupported format version {version}")
        weights = np.frombuffer(f.read(L * Q * 8), dtype="<f8")
        config = NetworkConfig(L=L, Q=Q, Nt=Nt, Nr=Nr,
                               inter_bs_distance_km=dist, max_tx_power_dBm=pdbm,
                               noise_power_dBm=ndbm, shadowing_std_dB=shad,
                               weights=tuple(weights), seed=seed)
        instances = []
        n_h = L * Q * L * Nr * Nt
        for i in range(count):
            bs = np.frombuffer(f.read(L * 2 * 8), dtype="<f8").reshape(L, 2)
            users = np.frombuffer(f.read(L * Q * 2 * 8), dtype="<f8").reshape(L, Q, 2)
            h = np.frombuffer(f.read(n_h * 16), dtype="<c16")
            if h.size != n_h:
                raise BadDatasetFile(f"truncated instance {i}")
            instances.append(NetworkInstance(
                config=config, H=h.reshape(L, Q, L, Nr, Nt).copy(),
                bs_positions=bs.copy(), user_positions=users.copy(), index=i))
    return config, instances
