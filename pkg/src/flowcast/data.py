"""Frame files, dataset manifests, splits and the synthetic advection generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as tc
from .dynamics import SystemState, integrate_state
from .grid import GridSpec

FRAME_MAGIC = "flowcast-frame/1"
MANIFEST_FORMAT = "flowcast-dataset/1"
_ENDIAN = {"little": "<f8", "big": ">f8"}
DEFAULT_DT_DAYS = 0.25
DAYS_PER_YEAR = 365.0


# ---------------------------------------------------------------------------
# frame files


def write_frame(path, values: np.ndarray, t: float, names: Sequence[str] | None = None) -> Path:
    """One JSON header line followed by the raw little-endian float64 payload ``[K, H, W]``."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError(f"frame must be [K, H, W], got {values.shape}")
    names = list(names) if names is not None else [f"q{k}" for k in range(values.shape[0])]
    if len(names) != values.shape[0]:
        raise ValueError("one name per quantity required")
    header = {"format": FRAME_MAGIC, "shape": list(values.shape), "names": names,
              "time": float(t), "endianness": "little", "dtype": "float64"}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return path


def read_frame(path) -> tuple[np.ndarray, float, list[str]]:
    """Return ``(values [K, H, W], time, names)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing frame header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt frame header ({exc})") from None
    if header.get("format") != FRAME_MAGIC:
        raise ValueError(f"{path}: not a frame file")
    tag = header.get("endianness")
    if tag not in _ENDIAN:
        raise ValueError(f"{path}: unknown endianness tag {tag!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = raw[nl + 1:]
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype=_ENDIAN[tag]).astype(np.float64).reshape(shape)
    return values, float(header["time"]), list(header["names"])


# ---------------------------------------------------------------------------
# manifests


@dataclass
class FrameEntry:
    time: float
    path: str


@dataclass
class DatasetManifest:
    """Frames sorted by time plus grid, names and static fields.

    Paths are relative to ``root``.
    """

    grid: GridSpec
    quantities: list[str]
    frames: list[FrameEntry]
    static: dict[str, str]
    root: Path = Path(".")
    dt_days: float = DEFAULT_DT_DAYS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.time)
        self.root = Path(self.root)
        times = [f.time for f in self.frames]
        if len(set(times)) != len(times):
            raise ValueError("duplicate frame times in manifest")

    @property
    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])

    @property
    def K(self) -> int:
        return len(self.quantities)

    def __len__(self) -> int:
        return len(self.frames)

    def read(self, i: int) -> np.ndarray:
        values, t, _ = read_frame(self.root / self.frames[i].path)
        if values.shape != (self.K,) + self.grid.shape:
            raise ValueError(f"frame {i} has shape {values.shape}, grid expects "
                             f"{(self.K,) + self.grid.shape}")
        if abs(t - self.frames[i].time) > 1e-9:
            raise ValueError(f"frame {i}: header time {t} != manifest time {self.frames[i].time}")
        return values

    def stack(self) -> np.ndarray:
        """All frames as ``[N, K, H, W]``."""
        if not self.frames:
            return np.zeros((0, self.K) + self.grid.shape)
        return np.stack([self.read(i) for i in range(len(self))])

    def static_fields(self) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for key in ("lsm", "oro"):
            values, _, _ = read_frame(self.root / self.static[key])
            out.append(values[0])
        return out[0], out[1]

    def subset(self, indices: Sequence[int], split: str | None = None) -> "DatasetManifest":
        meta = dict(self.meta)
        if split is not None:
            meta["split"] = split
        return DatasetManifest(self.grid, list(self.quantities), [self.frames[i] for i in indices],
                               dict(self.static), self.root, self.dt_days, meta)

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "grid": self.grid.to_dict(),
            "quantities": self.quantities,
            "dt_days": self.dt_days,
            "static": self.static,
            "frames": [{"time": f.time, "path": f.path} for f in self.frames],
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: unknown manifest format {d.get('format')!r}")
        m = cls(GridSpec.from_dict(d["grid"]), list(d["quantities"]),
                [FrameEntry(float(f["time"]), f["path"]) for f in d["frames"]],
                dict(d["static"]), path.parent, float(d.get("dt_days", DEFAULT_DT_DAYS)),
                d.get("meta", {}))
        missing = [p for p in [f.path for f in m.frames] + list(m.static.values())
                   if not (m.root / p).exists()]
        if missing:
            raise FileNotFoundError(f"{path}: {len(missing)} missing files, first {missing[0]}")
        return m


# ---------------------------------------------------------------------------
# splits


def split_dataset(manifest: DatasetManifest, rule: str = "year", *,
                  train_years: Sequence[int] = (), val_years: Sequence[int] = (),
                  test_years: Sequence[int] = (),
                  fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
                  ) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Disjoint train/val/test manifests.

    ``rule="year"`` assigns frames by ``floor(time / 365)``; every frame must
    fall in one of the listed years. ``rule="block"`` cuts the time-sorted
    frames into three contiguous blocks by ``fractions``, for datasets shorter
    than a year.
    """
    n = len(manifest)
    if rule == "year":
        years = np.floor(manifest.times / DAYS_PER_YEAR).astype(int)
        groups = [set(train_years), set(val_years), set(test_years)]
        if any(a & b for i, a in enumerate(groups) for b in groups[i + 1:]):
            raise ValueError("split years overlap")
        idx = [[i for i in range(n) if years[i] in g] for g in groups]
        unassigned = n - sum(len(x) for x in idx)
        if unassigned:
            raise ValueError(f"{unassigned} frames fall outside the listed years")
    elif rule == "block":
        f = np.asarray(fractions, dtype=float)
        if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
            raise ValueError("fractions must be three non-negative numbers summing to 1")
        cuts = np.round(np.cumsum(f) * n).astype(int)
        idx = [list(range(0, cuts[0])), list(range(cuts[0], cuts[1])), list(range(cuts[1], n))]
    else:
        raise ValueError(f"unknown split rule {rule!r}")
    names = ("train", "val", "test")
    for name, ix in zip(names, idx):
        if not ix:
            raise ValueError(f"{name} split is empty")
    return tuple(manifest.subset(ix, name) for name, ix in zip(names, idx))  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class Bump:
    amplitude: float
    x0: float  # pixel column
    y0: float  # pixel row
    sigma: float  # pixels


@dataclass
class VelocitySpec:
    """``constant``: ``(vx, vy)`` px/day. ``rotation``: angular rate ``omega`` rad/day about ``center``."""

    kind: str = "constant"
    vx: float = 1.0
    vy: float = 0.0
    omega: float = 0.0
    center: tuple[float, float] | None = None  # (x, y) pixels; grid centre by default

    def __post_init__(self):
        if self.kind not in ("constant", "rotation"):
            raise ValueError(f"unknown velocity kind {self.kind!r}")

    def field(self, H: int, W: int) -> np.ndarray:
        """Velocity ``[2, H, W]`` in pixels per day."""
        if self.kind == "constant":
            return np.stack([np.full((H, W), float(self.vx)), np.full((H, W), float(self.vy))])
        cx, cy = self.center if self.center is not None else ((W - 1) / 2.0, (H - 1) / 2.0)
        yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
        return np.stack([-self.omega * (yy - cy), self.omega * (xx - cx)])


@dataclass
class BiasSpec:
    """Standing day-night bias ``amplitude * sin(2 pi t / period) * cos(lat)`` added to observations."""

    amplitude: float = 0.0
    period_days: float = 1.0

    def field(self, grid: GridSpec, t: float) -> np.ndarray:
        pattern = np.cos(np.deg2rad(np.asarray(grid.lat_deg)))[:, None] * np.ones(grid.W)
        return self.amplitude * np.sin(2.0 * np.pi * t / self.period_days) * pattern


@dataclass
class SyntheticConfig:
    H: int = 32
    W: int = 64
    lat_boundary: str = "periodic"
    n_frames: int = 64
    dt_days: float = DEFAULT_DT_DAYS
    t0_days: float = 0.0
    background: float = 0.0
    bumps: list[Bump] = field(default_factory=lambda: [Bump(1.0, 20.0, 16.0, 3.0)])
    velocity: VelocitySpec = field(default_factory=VelocitySpec)
    bias: BiasSpec = field(default_factory=BiasSpec)
    quantities: list[str] | None = None  # one name per quantity; bumps shared
    substeps: int = 32
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.velocity, dict):
            self.velocity = VelocitySpec(**self.velocity)
        if isinstance(self.bias, dict):
            self.bias = BiasSpec(**self.bias)
        self.bumps = [Bump(**b) if isinstance(b, dict) else b for b in self.bumps]
        if self.n_frames < 1 or self.dt_days <= 0 or self.substeps < 1:
            raise ValueError("n_frames, dt_days and substeps must be positive")

    @property
    def names(self) -> list[str]:
        return self.quantities or ["tracer"]

    def grid(self) -> GridSpec:
        return GridSpec.regular(self.H, self.W, self.lat_boundary)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        return cls(**d)


def bump_field(H: int, W: int, bumps: Sequence[Bump], background: float = 0.0) -> np.ndarray:
    """Sum of Gaussians with longitude wrap-around (nearest periodic image)."""
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    out = np.full((H, W), float(background))
    for b in bumps:
        dx = (xx - b.x0 + 0.5 * W) % W - 0.5 * W
        out += b.amplitude * np.exp(-(dx**2 + (yy - b.y0) ** 2) / (2.0 * b.sigma**2))
    return out


def static_fields(grid: GridSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Land-sea mask from smoothed noise in [0, 1]; orography as a smooth ridge."""
    rng = np.random.default_rng(seed)
    noise = gaussian_filter(rng.standard_normal(grid.shape), sigma=max(grid.H, grid.W) / 16.0,
                            mode=("nearest", "wrap"))
    lsm = 1.0 / (1.0 + np.exp(-4.0 * noise / (noise.std() + 1e-12)))
    lon = np.deg2rad(np.asarray(grid.lon_deg))[None, :]
    lat = np.deg2rad(np.asarray(grid.lat_deg))[:, None]
    oro = np.exp(-((lon - 0.5) ** 2) / 0.1) * np.cos(lat) ** 2
    return lsm, oro


@dataclass
class SyntheticData:
    times: np.ndarray  # [N]
    frames: np.ndarray  # [N, K, H, W] observations (state plus bias)
    clean: np.ndarray  # [N, K, H, W] advected state without bias
    bias: np.ndarray  # [N, K, H, W]
    velocity: np.ndarray  # [2, H, W]
    lsm: np.ndarray
    oro: np.ndarray
    grid: GridSpec


def check_cfl(cfg: SyntheticConfig) -> float:
    """Largest Courant number ``|v| h`` at the reference step; rejects values above 0.5."""
    v = cfg.velocity.field(cfg.H, cfg.W)
    courant = float(np.sqrt((v**2).sum(0)).max()) * cfg.dt_days / cfg.substeps
    if courant > 0.5:
        raise ValueError(f"CFL violation: |v|*dt = {courant:.3f} px > 0.5 at the reference step")
    return courant


def generate(cfg: SyntheticConfig) -> SyntheticData:
    """Integrate flux-form advection with RK4 at ``dt / substeps`` and sample every ``dt``."""
    check_cfl(cfg)
    grid = cfg.grid()
    K = len(cfg.names)
    u0 = np.stack([bump_field(cfg.H, cfg.W, cfg.bumps, cfg.background)] * K)
    vel = cfg.velocity.field(cfg.H, cfg.W)
    v0 = np.broadcast_to(vel, (K, 2, cfg.H, cfg.W)).copy()
    times = cfg.t0_days + cfg.dt_days * np.arange(cfg.n_frames)
    if cfg.n_frames > 1:
        with tc.no_tape():
            traj = integrate_state(SystemState(u0, v0), list(times), cfg.dt_days / cfg.substeps,
                                   "rk4", grid=grid)
        clean = np.stack([traj.u(i).data for i in range(cfg.n_frames)])
    else:
        clean = u0[None]
    bias = np.stack([np.broadcast_to(cfg.bias.field(grid, t), (K, cfg.H, cfg.W)) for t in times])
    lsm, oro = static_fields(grid, cfg.seed)
    return SyntheticData(times, clean + bias, clean, bias, vel, lsm, oro, grid)


def translation_solution(u0: np.ndarray, vx: float, t: float) -> np.ndarray:
    """Exact solution of the semi-discrete constant-velocity problem along longitude.

    With central differences each Fourier mode ``k`` evolves as
    ``exp(-i vx sin(2 pi k / W) t)``; this is the limit every consistent
    time stepper converges to.
    """
    W = u0.shape[-1]
    k = np.fft.fftfreq(W) * W
    phase = np.exp(-1j * vx * np.sin(2.0 * np.pi * k / W) * t)
    return np.real(np.fft.ifft(np.fft.fft(u0, axis=-1) * phase, axis=-1))


def dataset_from_arrays(values: np.ndarray, times_days: Sequence[float], grid: GridSpec,
                        quantities: Sequence[str], out_dir, lsm: np.ndarray | None = None,
                        oro: np.ndarray | None = None, meta: dict | None = None,
                        dt_days: float | None = None) -> DatasetManifest:
    """Write in-memory arrays ``[N, K, H, W]`` as frames plus ``manifest.json``.

    This is the entry point for external gridded data: regrid to a regular
    lat/lon grid with latitudes south to north and longitudes from -180, stack
    the chosen variables along K, express times in days since a fixed epoch
    (``year = floor(t / 365)`` drives the year split) and pass land-sea mask
    and orography if available. Missing static fields are written as zeros.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 4 or values.shape[-2:] != grid.shape or values.shape[1] != len(quantities):
        raise ValueError(f"values {values.shape} do not match [N, {len(quantities)}, {grid.H}, {grid.W}]")
    if len(times_days) != len(values):
        raise ValueError("one time per frame required")
    out = Path(out_dir)
    entries = []
    for i, t in enumerate(times_days):
        rel = f"frames/{i:05d}.frame"
        write_frame(out / rel, values[i], float(t), quantities)
        entries.append(FrameEntry(float(t), rel))
    static = {}
    for name, arr in (("lsm", lsm), ("oro", oro)):
        arr = np.zeros(grid.shape) if arr is None else np.asarray(arr, dtype=float)
        write_frame(out / f"static/{name}.frame", arr[None], 0.0, [name])
        static[name] = f"static/{name}.frame"
    times = np.asarray(times_days, dtype=float)
    if dt_days is None:
        dt_days = float(np.median(np.diff(np.sort(times)))) if len(times) > 1 else DEFAULT_DT_DAYS
    manifest = DatasetManifest(grid, list(quantities), entries, static, out, dt_days, dict(meta or {}))
    manifest.save(out / "manifest.json")
    return manifest


def synthetic_advection_dataset(cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Generate frames, write them under ``out_dir`` and save ``manifest.json``."""
    out = Path(out_dir)
    data = generate(cfg)
    meta = {"generator": cfg.to_dict(), "static_seed": cfg.seed,
            "analytic": "circular shift by vx*t (semi-discrete Fourier solution)"
            if cfg.velocity.kind == "constant" and cfg.velocity.vy == 0 and cfg.lat_boundary == "periodic"
            else None}
    manifest = dataset_from_arrays(data.frames, data.times, data.grid, cfg.names, out,
                                   data.lsm, data.oro, meta, cfg.dt_days)
    np.save(out / "bias.npy", data.bias)
    return manifest


def load_bias(manifest: DatasetManifest) -> np.ndarray | None:
    """Injected bias for the manifest's frames, if the generator stored one."""
    path = manifest.root / "bias.npy"
    if not path.exists():
        return None
    full = np.load(path)
    gen = manifest.meta.get("generator", {})
    t0, dt = gen.get("t0_days", 0.0), gen.get("dt_days", manifest.dt_days)
    idx = np.round((manifest.times - t0) / dt).astype(int)
    return full[idx]


def conservation_audit(frames: np.ndarray) -> dict:
    """Per-quantity global integrals over time and their worst relative drift."""
    integrals = np.asarray(frames, dtype=float).sum(axis=(-2, -1))  # [N, K]
    ref = integrals[0]
    scale = np.where(np.abs(ref) > 0, np.abs(ref), 1.0)
    drift = np.max(np.abs(integrals - ref) / scale, axis=0)
    return {"integrals": integrals, "max_rel_drift": drift}
