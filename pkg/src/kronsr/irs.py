"""IRS-aided MIMO uplink: channel generation, pilot protocol and the
Kronecker-structured sparse measurement model used for channel estimation.

Angles live on the grid ``cos(psi_n) = 2n/N - 1`` (``n = 1..N``); every
realization is on-grid, and grid positions are stored as 0-based indices.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import khatri_rao

from .errors import DimensionError
from .kron import FactorChain, KroneckerDictionary, kron_vectors

SCHEMA_CHANNEL = "kronsr/channel-realization@1"
SCHEMA_MODEL = "kronsr/measurement-model@1"


@dataclass(frozen=True)
class SystemGeometry:
    R: int = 16
    T: int = 6
    L: int = 256
    N: int = 18
    P_BS: int = 3
    P_MS: int = 3

    def __post_init__(self):
        for name in ("R", "T", "L", "N", "P_BS", "P_MS"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.P_BS > self.N or self.P_MS > self.N:
            raise ValueError("path counts cannot exceed the grid size (paths use distinct grid angles)")

    @property
    def coefficient_count(self) -> int:
        return self.N ** 3


@dataclass(frozen=True)
class PilotProtocol:
    """Pilot block ``X`` (``T x K_P``) repeated under IRS configurations ``Theta`` (``L x K_I``)."""

    X: np.ndarray
    Theta: np.ndarray

    @property
    def K_P(self) -> int:
        return self.X.shape[1]

    @property
    def K_I(self) -> int:
        return self.Theta.shape[1]

    @property
    def K(self) -> int:
        return self.K_I * self.K_P


@dataclass(frozen=True)
class ChannelRealization:
    H_MS: np.ndarray
    H_BS: np.ndarray
    irs_aoa_idx: np.ndarray   # phi_MS,p
    ms_aod_idx: int           # alpha_MS
    bs_aoa_idx: np.ndarray    # alpha_BS,p
    irs_aod_idx: int          # phi_BS
    beta_ms: np.ndarray
    beta_bs: np.ndarray
    geometry: SystemGeometry

    @property
    def angles(self) -> dict:
        psi = grid_angles(self.geometry.N)
        return {
            "phi_ms": psi[self.irs_aoa_idx],
            "alpha_ms": float(psi[self.ms_aod_idx]),
            "alpha_bs": psi[self.bs_aoa_idx],
            "phi_bs": float(psi[self.irs_aod_idx]),
        }


@dataclass(frozen=True)
class MeasurementModel:
    Phi_L: np.ndarray
    Phi_T: np.ndarray
    Phi_R: np.ndarray
    y_tilde: np.ndarray
    sigma2: float

    @property
    def dictionary(self) -> KroneckerDictionary:
        return KroneckerDictionary([self.Phi_L, self.Phi_T, self.Phi_R])

    @property
    def measurement_count(self) -> int:
        return self.y_tilde.size

    @property
    def coefficient_count(self) -> int:
        return self.Phi_L.shape[1] * self.Phi_T.shape[1] * self.Phi_R.shape[1]


@dataclass(frozen=True)
class GroundTruthFactors:
    g_L: np.ndarray
    g_T_conj: np.ndarray
    g_R: np.ndarray

    def vector(self) -> np.ndarray:
        return kron_vectors([self.g_L, self.g_T_conj, self.g_R])

    def chain(self) -> FactorChain:
        return FactorChain((self.g_L, self.g_T_conj, self.g_R))


# ---------------------------------------------------------------- arrays


def grid_cosines(N: int) -> np.ndarray:
    return 2.0 * np.arange(1, N + 1) / N - 1.0


def grid_angles(N: int) -> np.ndarray:
    """Grid angles ``psi_n = arccos(2n/N - 1)``, ``n = 1..N``."""
    if N < 1:
        raise ValueError("N must be positive")
    return np.arccos(np.clip(grid_cosines(N), -1.0, 1.0))


def _steer_from_cos(Q, c):
    q = np.arange(Q)[:, None]
    return np.exp(1j * np.pi * q * np.atleast_1d(c)[None, :]) / np.sqrt(Q)


def steering_vector(Q: int, psi: float) -> np.ndarray:
    """Half-wavelength ULA response ``(1/sqrt(Q)) [1, e^{j pi cos psi}, ...]``."""
    if Q < 1:
        raise ValueError("Q must be positive")
    return _steer_from_cos(Q, np.cos(psi))[:, 0]


def bem_dictionary(Q: int, N: int) -> np.ndarray:
    """``Q x N`` matrix of steering vectors on the angular grid."""
    if Q < 1 or N < 1:
        raise ValueError("Q and N must be positive")
    return _steer_from_cos(Q, grid_cosines(N))


# ---------------------------------------------------------------- channel


def _cn(rng, size):
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def draw_channel(geometry: SystemGeometry, rng: np.random.Generator) -> ChannelRealization:
    """Draw an on-grid geometric channel with ``CN(0, 1)`` path gains.

    Path angles within one link are distinct grid points drawn uniformly.
    """
    g = geometry
    irs_aoa = np.sort(rng.choice(g.N, size=g.P_MS, replace=False))
    ms_aod = int(rng.integers(g.N))
    bs_aoa = np.sort(rng.choice(g.N, size=g.P_BS, replace=False))
    irs_aod = int(rng.integers(g.N))
    beta_ms = _cn(rng, g.P_MS)
    beta_bs = _cn(rng, g.P_BS)

    A_L = bem_dictionary(g.L, g.N)
    A_T = bem_dictionary(g.T, g.N)
    A_R = bem_dictionary(g.R, g.N)
    H_MS = np.sqrt(g.L * g.T / g.P_MS) * (A_L[:, irs_aoa] * beta_ms) @ np.tile(
        A_T[:, [ms_aod]].conj().T, (g.P_MS, 1))
    H_BS = np.sqrt(g.R * g.L / g.P_BS) * (A_R[:, bs_aoa] * beta_bs) @ np.tile(
        A_L[:, [irs_aod]].conj().T, (g.P_BS, 1))
    return ChannelRealization(H_MS, H_BS, irs_aoa, ms_aod, bs_aoa, irs_aod, beta_ms, beta_bs, geometry)


def channel_from_paths(ch: ChannelRealization) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild ``(H_MS, H_BS)`` path by path from the stored angles and gains."""
    g = ch.geometry
    ang = ch.angles
    H_MS = np.zeros((g.L, g.T), dtype=complex)
    for phi, beta in zip(ang["phi_ms"], ch.beta_ms):
        H_MS += np.sqrt(g.L * g.T / g.P_MS) * beta * np.outer(
            steering_vector(g.L, phi), steering_vector(g.T, ang["alpha_ms"]).conj())
    H_BS = np.zeros((g.R, g.L), dtype=complex)
    for alpha, beta in zip(ang["alpha_bs"], ch.beta_bs):
        H_BS += np.sqrt(g.R * g.L / g.P_BS) * beta * np.outer(
            steering_vector(g.R, alpha), steering_vector(g.L, ang["phi_bs"]).conj())
    return H_MS, H_BS


def cascaded_channel(ch: ChannelRealization, theta) -> np.ndarray:
    """``H_BS diag(theta) H_MS``."""
    theta = np.ravel(np.asarray(theta))
    if theta.size != ch.H_BS.shape[1]:
        raise DimensionError(f"theta has length {theta.size}, IRS has {ch.H_BS.shape[1]} elements")
    return (ch.H_BS * theta) @ ch.H_MS


def make_protocol(geometry: SystemGeometry, K_I: int = 10, K_P: int = 4,
                  rng: np.random.Generator | None = None,
                  irs_amplitude: float | None = None) -> PilotProtocol:
    """Random pilots and IRS configurations.

    Pilots are unit-modulus QPSK symbols.  IRS entries are ``+/- irs_amplitude``
    with equal probability; the default amplitude is ``1/sqrt(N)``.
    """
    if K_I < 1 or K_P < 1:
        raise ValueError("K_I and K_P must be positive")
    rng = np.random.default_rng() if rng is None else rng
    c = 1.0 / np.sqrt(geometry.N) if irs_amplitude is None else float(irs_amplitude)
    X = (rng.choice([-1.0, 1.0], size=(geometry.T, K_P))
         + 1j * rng.choice([-1.0, 1.0], size=(geometry.T, K_P))) / np.sqrt(2.0)
    Theta = c * rng.choice([-1.0, 1.0], size=(geometry.L, K_I))
    return PilotProtocol(X, Theta.astype(complex))


def received_pilots(ch: ChannelRealization, protocol: PilotProtocol, sigma2: float,
                    rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """``Y_k = H_BS diag(theta_k) H_MS X + W_k`` for each configuration."""
    out = []
    R = ch.H_BS.shape[0]
    for k in range(protocol.K_I):
        Y = cascaded_channel(ch, protocol.Theta[:, k]) @ protocol.X
        if sigma2 > 0:
            Y = Y + np.sqrt(sigma2) * _cn(rng, (R, protocol.K_P))
        out.append(Y)
    return out


def noise_variance_for_snr(ch: ChannelRealization, protocol: PilotProtocol, snr_db: float) -> float:
    """Per-entry noise variance giving the requested pilot SNR on this realization."""
    clean = np.concatenate([Y.ravel() for Y in received_pilots(ch, protocol, 0.0)])
    return float(np.mean(np.abs(clean) ** 2) / 10.0 ** (snr_db / 10.0))


# ---------------------------------------------------------------- sparse model


def irs_dictionary(Theta: np.ndarray, L: int, N: int) -> np.ndarray:
    """First ``N`` columns of ``Theta^T (A_L^T kr A_L^H)^T`` (``kr``: Khatri-Rao)."""
    A_L = bem_dictionary(L, N)
    kr = khatri_rao(A_L.T, A_L.conj().T)
    return (Theta.T @ kr.T)[:, :N]


def build_measurement_model(protocol: PilotProtocol, geometry: SystemGeometry,
                            Ys, sigma2: float) -> MeasurementModel:
    """Stack the received blocks into ``y = (Phi_L (x) Phi_T (x) Phi_R) g + w``.

    Each ``Y_k`` is vectorized column-major and blocks are ordered by ``k``.
    """
    g = geometry
    if protocol.X.shape[0] != g.T or protocol.Theta.shape[0] != g.L:
        raise DimensionError("protocol does not match the geometry")
    if len(Ys) != protocol.K_I:
        raise DimensionError(f"expected {protocol.K_I} received blocks, got {len(Ys)}")
    for Y in Ys:
        if np.shape(Y) != (g.R, protocol.K_P):
            raise DimensionError(f"received block of shape {np.shape(Y)}, expected {(g.R, protocol.K_P)}")
    Phi_L = irs_dictionary(protocol.Theta, g.L, g.N)
    Phi_T = protocol.X.T @ bem_dictionary(g.T, g.N).conj()
    Phi_R = bem_dictionary(g.R, g.N)
    y = np.concatenate([np.asarray(Y).ravel(order="F") for Y in Ys])
    return MeasurementModel(Phi_L, Phi_T, Phi_R, y, float(sigma2))


def ground_truth_factors(ch: ChannelRealization) -> GroundTruthFactors:
    """Sparse factors ``(g_L, g_T^*, g_R)`` of an on-grid realization.

    ``g_L`` collects the IRS-side gains at the wrapped index differences
    ``(n_aod - n_aoa) mod N``; BS-side gains sit in ``g_R`` and the MS departure
    is a unit selector.
    """
    g = ch.geometry
    g_R = np.zeros(g.N, dtype=complex)
    np.add.at(g_R, ch.bs_aoa_idx, np.sqrt(g.R * g.L / g.P_BS) * ch.beta_bs)
    g_T_conj = np.zeros(g.N, dtype=complex)
    g_T_conj[ch.ms_aod_idx] = 1.0
    g_L = np.zeros(g.N, dtype=complex)
    np.add.at(g_L, (ch.irs_aod_idx - ch.irs_aoa_idx) % g.N,
              np.sqrt(g.L * g.T / g.P_MS) * ch.beta_ms)
    return GroundTruthFactors(g_L, g_T_conj, g_R)


def reconstruct_cascaded(x_est, geometry: SystemGeometry, protocol: PilotProtocol) -> list[np.ndarray]:
    """Cascaded channels ``H_BS diag(theta_k) H_MS`` implied by a coefficient estimate.

    ``x_est`` may be a :class:`~kronsr.solvers.SparseEstimate`, a
    :class:`GroundTruthFactors` or a flat vector of length ``N^3``.
    """
    g = geometry
    if isinstance(x_est, GroundTruthFactors):
        x = x_est.vector()
    elif hasattr(x_est, "x_full"):
        x = x_est.x_full
    else:
        x = np.asarray(x_est)
    x = np.ravel(x)
    if x.size != g.N ** 3:
        raise DimensionError(f"coefficient vector of length {x.size}, expected {g.N ** 3}")
    Phi_L = irs_dictionary(protocol.Theta, g.L, g.N)
    A_T = bem_dictionary(g.T, g.N)
    A_R = bem_dictionary(g.R, g.N)
    Z = np.einsum("kj,jtr->ktr", Phi_L, x.reshape(g.N, g.N, g.N))
    return [A_R @ Zk.T @ A_T.conj().T for Zk in Z]


# ---------------------------------------------------------------- SER


def qam8_constellation() -> tuple[np.ndarray, np.ndarray]:
    """Rectangular 4x2 8-QAM with unit average energy.

    Returns the points and their Gray labels (two bits on the in-phase rail,
    one on quadrature).
    """
    gray4 = [0b00, 0b01, 0b11, 0b10]
    pts, labels = [], []
    for qi, q in enumerate((-1.0, 1.0)):
        for ii, i in enumerate((-3.0, -1.0, 1.0, 3.0)):
            pts.append(complex(i, q))
            labels.append((gray4[ii] << 1) | qi)
    pts = np.array(pts) / np.sqrt(6.0)
    return pts, np.array(labels)


def qam8_ser_awgn(snr_db: float) -> float:
    """Exact 8-QAM symbol error rate for unit-energy symbols in ``CN(0, 10^{-snr/10})`` noise."""
    sigma = np.sqrt(10.0 ** (-snr_db / 10.0) / 2.0)
    q = 0.5 * math.erfc((1.0 / np.sqrt(6.0)) / sigma / np.sqrt(2.0))
    p_i = 1.5 * q   # 4-level rail
    p_q = q         # 2-level rail
    return float(1.0 - (1.0 - p_i) * (1.0 - p_q))


def simulate_ser(true_channels, est_channels, snr_db: float, n_symbols: int,
                 rng: np.random.Generator, diagnostics: dict | None = None,
                 mode: str = "beamforming") -> float:
    """Symbol error rate of uncoded 8-QAM over the true channels using estimated CSI.

    Parameters
    ----------
    true_channels, est_channels : list of (R, T) arrays
    snr_db : float
        Noise is set so that ``||H_k||_F^2 / noise = snr``, which is the
        post-combining SNR of a rank-one channel with perfect CSI.
    n_symbols : int
        Split evenly over configurations (rounded up).
    rng : numpy.random.Generator
    diagnostics : dict, optional
        Filled with ``rank_deficient_configs`` and ``symbols``.
    mode : {"beamforming", "zf"}
        ``"beamforming"`` sends one stream on the dominant singular pair of
        the *estimated* channel and rescales by the estimated gain.  ``"zf"``
        sends ``T`` streams and equalizes with the pseudo-inverse of the
        estimate, falling back to a regularized inverse when the estimate is
        rank-deficient.  The cascaded channel has rank one (single MS
        departure), so ``"zf"`` cannot separate more than one stream.
    """
    if len(true_channels) != len(est_channels) or not true_channels:
        raise DimensionError("need matching, non-empty channel lists")
    if n_symbols < 1:
        raise ValueError("n_symbols must be positive")
    if mode not in ("beamforming", "zf"):
        raise ValueError(f"unknown SER mode {mode!r}")
    pts, _ = qam8_constellation()
    per = int(np.ceil(n_symbols / len(true_channels)))
    errors = total = 0
    fallback = []
    for k, (H, Hh) in enumerate(zip(true_channels, est_channels)):
        H = np.asarray(H)
        Hh = np.asarray(Hh)
        if H.shape != Hh.shape:
            raise DimensionError(f"configuration {k}: shapes {H.shape} and {Hh.shape} differ")
        R, T = H.shape
        noise_var = np.linalg.norm(H) ** 2 / 10.0 ** (snr_db / 10.0)
        u, s, vh = np.linalg.svd(Hh)
        tiny = s[0] <= 1e-12 * max(1.0, np.linalg.norm(H))
        if mode == "beamforming":
            if tiny:
                # no usable estimate: fixed beams, unit gain
                u0, v0, gain = np.eye(R)[:, 0], np.eye(T)[:, 0], 1.0
                fallback.append(k)
            else:
                u0, v0, gain = u[:, 0], vh[0].conj(), s[0]
            sym = rng.integers(0, pts.size, size=per)
            rx = np.outer(H @ v0, pts[sym]) + np.sqrt(noise_var) * _cn(rng, (R, per))
            est = (u0.conj() @ rx) / gain
            sym = sym.ravel()
        else:
            n_vec = int(np.ceil(per / T))
            sym = rng.integers(0, pts.size, size=(T, n_vec))
            rx = H @ pts[sym] + np.sqrt(noise_var) * _cn(rng, (R, n_vec))
            if tiny or s[-1] <= 1e-10 * s[0]:
                fallback.append(k)
                G = np.linalg.solve(Hh.conj().T @ Hh + noise_var * np.eye(T), Hh.conj().T)
            else:
                G = np.linalg.pinv(Hh)
            est = (G @ rx).ravel()
            sym = sym.ravel()
        det = np.argmin(np.abs(est[:, None] - pts[None, :]), axis=1)
        errors += int(np.count_nonzero(det != sym))
        total += sym.size
    if fallback:
        warnings.warn(f"estimated channel is rank-deficient for configurations {fallback}; "
                      "used a fallback equalizer", RuntimeWarning, stacklevel=2)
    if diagnostics is not None:
        diagnostics["rank_deficient_configs"] = fallback
        diagnostics["symbols"] = total
    return errors / total


# ---------------------------------------------------------------- JSON


def _enc(a):
    a = np.asarray(a)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def _dec(v):
    a = np.asarray(v, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


def channel_to_dict(ch: ChannelRealization) -> dict:
    return {
        "schema": SCHEMA_CHANNEL,
        "geometry": {k: int(getattr(ch.geometry, k)) for k in ("R", "T", "L", "N", "P_BS", "P_MS")},
        "irs_aoa_idx": [int(i) for i in ch.irs_aoa_idx],
        "ms_aod_idx": int(ch.ms_aod_idx),
        "bs_aoa_idx": [int(i) for i in ch.bs_aoa_idx],
        "irs_aod_idx": int(ch.irs_aod_idx),
        "beta_ms": _enc(ch.beta_ms),
        "beta_bs": _enc(ch.beta_bs),
        "H_MS": _enc(ch.H_MS),
        "H_BS": _enc(ch.H_BS),
    }


def channel_from_dict(d: dict) -> ChannelRealization:
    if d.get("schema") != SCHEMA_CHANNEL:
        raise ValueError(f"unsupported schema {d.get('schema')!r}")
    return ChannelRealization(
        H_MS=_dec(d["H_MS"]), H_BS=_dec(d["H_BS"]),
        irs_aoa_idx=np.asarray(d["irs_aoa_idx"], dtype=int), ms_aod_idx=int(d["ms_aod_idx"]),
        bs_aoa_idx=np.asarray(d["bs_aoa_idx"], dtype=int), irs_aod_idx=int(d["irs_aod_idx"]),
        beta_ms=_dec(d["beta_ms"]), beta_bs=_dec(d["beta_bs"]),
        geometry=SystemGeometry(**d["geometry"]),
    )


def model_to_dict(model: MeasurementModel) -> dict:
    return {
        "schema": SCHEMA_MODEL,
        "Phi_L": _enc(model.Phi_L),
        "Phi_T": _enc(model.Phi_T),
        "Phi_R": _enc(model.Phi_R),
        "y_tilde": _enc(model.y_tilde),
        "sigma2": float(model.sigma2),
    }


def model_from_dict(d: dict) -> MeasurementModel:
    if d.get("schema") != SCHEMA_MODEL:
        raise ValueError(f"unsupported schema {d.get('schema')!r}")
    return MeasurementModel(_dec(d["Phi_L"]), _dec(d["Phi_T"]), _dec(d["Phi_R"]),
                            _dec(d["y_tilde"]), float(d["sigma2"]))


def save_json(obj, path) -> None:
    if isinstance(obj, ChannelRealization):
        payload = channel_to_dict(obj)
    elif isinstance(obj, MeasurementModel):
        payload = model_to_dict(obj)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    Path(path).write_text(json.dumps(payload))


def load_json(path):
    d = json.loads(Path(path).read_text())
    schema = d.get("schema")
    if schema == SCHEMA_CHANNEL:
        return channel_from_dict(d)
    if schema == SCHEMA_MODEL:
        return model_from_dict(d)
    raise ValueError(f"unknown schema {schema!r}")
