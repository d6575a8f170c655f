"""Best-track ingestion, synthetic storm generation, windowing, normalization.

Synthetic tracks follow random-walk-perturbed recurving arcs with a
deepening/filling pressure lifecycle; wind speed is coupled to the pressure
deficit through a power law, and the gridded environment fields carry a
blob whose per-channel displacement encodes the storm's next-step motion.
Together these give the conditional model real signal to learn at desk
scale while every attribute stays inside its physical range.

All randomness flows through numpy's Philox counter-based generator so
identical (config, seed) pairs reproduce byte-identical datasets on any
platform.  Longitudes are stored unwrapped (continuous) inside tracks and
windows; `wrap_lon` restores the [-180, 180] convention on output.
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

BEST_TRACK_COLUMNS = ["track_id", "timestamp", "lat", "lon", "wind_ms", "pressure_hpa"]
STEPS_PER_YEAR = 1460  # 6-hour cadence, 365 days

ENV_BLOB_MAGIC = b"PDEF"
ENV_BLOB_VERSION = 1
_ENV_HEADER = struct.Struct("<4sIIIII")


# ---------------------------------------------------------------------------
# Core records
# ---------------------------------------------------------------------------


@dataclass
class Track:
    """One storm: times (n,) int64 6-hour indices, attrs (n, 4) float64.

    Attribute columns are (lat, lon, wind, pressure) with lon unwrapped.
    """

    track_id: str
    year: int
    times: np.ndarray
    attrs: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class TrackWindow:
    """A (history, future) sample plus its aligned environment fields."""

    track_id: str
    year: int
    origin_time: int
    history: np.ndarray   # (M, 4)
    future: np.ndarray    # (N, 4)
    env_hist: np.ndarray  # (M, C, H, W) float32
    env_fut: np.ndarray   # (N, C, H, W) float32
    x_ref: np.ndarray     # (2,) lat/lon of the last history observation


@dataclass
class NormStats:
    """Training-split statistics used for (de)normalization."""

    wind_mu: float
    wind_sigma: float
    pres_mu: float
    pres_sigma: float
    env_mu: np.ndarray     # (C,)
    env_sigma: np.ndarray  # (C,)
    sigma_coord: float

    def validate(self) -> None:
        sigmas = [self.wind_sigma, self.pres_sigma, self.sigma_coord,
                  *np.atleast_1d(self.env_sigma).tolist()]
        if any(not np.isfinite(s) or s <= 0 for s in sigmas):
            raise ValidationError(f"NormStats contains a non-positive sigma: {self}")


@dataclass
class Dataset:
    tracks: list[Track]
    envs: list[np.ndarray]  # per track: (n, C, H, W) float32
    cfg: "GenConfig"


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def wrap_lon(lon):
    """Map longitudes into [-180, 180)."""
    return (np.asarray(lon) + 180.0) % 360.0 - 180.0


def validate_observation(lat, lon, wind, pressure, where: str) -> None:
    if not (-90.0 <= lat <= 90.0):
        raise ValidationError(f"{where}: latitude {lat} outside [-90, 90]")
    if not (-180.0 <= lon <= 180.0):
        raise ValidationError(f"{where}: longitude {lon} outside [-180, 180]")
    if not (np.isfinite(wind) and wind >= 0.0):
        raise ValidationError(f"{where}: wind {wind} must be finite and >= 0")
    if not (850.0 < pressure < 1100.0):
        raise ValidationError(f"{where}: pressure {pressure} outside (850, 1100)")


# ---------------------------------------------------------------------------
# Best-track CSV
# ---------------------------------------------------------------------------


def parse_best_track(text: str) -> list[Track]:
    """Parse the best-track CSV format into one Track per distinct id.

    Expects the exact header `track_id,timestamp,lat,lon,wind_ms,pressure_hpa`
    and rows sorted by (track_id, timestamp).  Longitudes are unwrapped to a
    continuous series per track after validation.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("best-track CSV is empty")
    header = [h.strip() for h in lines[0].split(",")]
    for col in BEST_TRACK_COLUMNS:
        if col not in header:
            raise ParseError(f"best-track CSV is missing column '{col}'")
    if len(header) != len(BEST_TRACK_COLUMNS):
        extra = set(header) - set(BEST_TRACK_COLUMNS)
        raise ParseError(f"best-track CSV has unknown columns: {sorted(extra)}")
    idx = {col: header.index(col) for col in BEST_TRACK_COLUMNS}

    groups: dict[str, list[tuple[int, float, float, float, float]]] = {}
    order: list[str] = []
    last_id = None
    for row_no, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise ParseError(f"row {row_no}: expected {len(header)} fields, got {len(parts)}")
        tid = parts[idx["track_id"]]
        try:
            ts = int(parts[idx["timestamp"]])
            lat = float(parts[idx["lat"]])
            lon = float(parts[idx["lon"]])
            wind = float(parts[idx["wind_ms"]])
            pres = float(parts[idx["pressure_hpa"]])
        except ValueError as exc:
            raise ParseError(f"row {row_no}: {exc}") from None
        validate_observation(lat, lon, wind, pres, f"row {row_no}")
        if tid not in groups:
            groups[tid] = []
            order.append(tid)
        elif tid != last_id:
            raise ParseError(f"row {row_no}: rows not sorted by track_id "
                             f"('{tid}' reappears)")
        if groups[tid] and ts <= groups[tid][-1][0]:
            raise ValidationError(f"row {row_no}: timestamps not strictly "
                                  f"increasing within track '{tid}'")
        groups[tid].append((ts, lat, lon, wind, pres))
        last_id = tid

    tracks = []
    for tid in order:
        rows = np.array(groups[tid], dtype=np.float64)
        attrs = rows[:, 1:5].copy()
        attrs[:, 1] = np.unwrap(attrs[:, 1], period=360.0)
        tracks.append(Track(track_id=tid,
                            year=int(rows[0, 0]) // STEPS_PER_YEAR,
                            times=rows[:, 0].astype(np.int64),
                            attrs=attrs))
    return tracks


def format_best_track(tracks: list[Track]) -> str:
    lines = [",".join(BEST_TRACK_COLUMNS)]
    for track in tracks:
        for i in range(len(track)):
            lat, lon, wind, pres = (float(v) for v in track.attrs[i])
            lines.append(f"{track.track_id},{track.times[i]},"
                         f"{lat!r},{float(wrap_lon(lon))!r},{wind!r},{pres!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic dataset generator
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    n_tracks: int = 200
    len_min: int = 20
    len_max: int = 40
    channels: int = 4
    grid: int = 16
    # wind = wind_a * (p_env - pressure)^wind_b + noise; generator constants,
    # not truth claims
    p_env: float = 1015.0
    wind_a: float = 3.4
    wind_b: float = 0.65
    wind_noise: float = 0.5
    track_noise: float = 0.02
    env_noise: float = 0.1
    advect_gain: float = 8.0   # blob pixels per degree of next-step motion

    def validate(self) -> None:
        if self.n_tracks < 1:
            raise ConfigError(f"n_tracks must be >= 1, got {self.n_tracks}")
        if not (1 <= self.len_min <= self.len_max):
            raise ConfigError(f"bad track length range [{self.len_min}, {self.len_max}]")
        if self.channels < 1 or self.grid < 2:
            raise ConfigError(f"bad field shape C={self.channels}, H=W={self.grid}")
        if self.wind_a <= 0 or self.wind_b <= 0:
            raise ConfigError("wind-pressure coupling constants must be positive")
        if min(self.wind_noise, self.track_noise, self.env_noise) < 0:
            raise ConfigError("noise levels must be non-negative")


def _lifecycle(rng: np.random.Generator, n: int) -> np.ndarray:
    """Pressure deficit (hPa) over the track: deepen, peak, fill."""
    depth = rng.uniform(25.0, 70.0)
    shape = rng.uniform(0.8, 1.6)
    u = np.linspace(0.0, 1.0, n)
    bump = np.sin(np.pi * u) ** shape
    noise = np.zeros(n)
    for i in range(1, n):
        noise[i] = 0.8 * noise[i - 1] + rng.normal(0.0, 1.0)
    return np.clip(6.0 + (depth - 6.0) * bump + noise, 1.0, 160.0)


def _synth_track(rng: np.random.Generator, cfg: GenConfig, index: int) -> Track:
    n = int(rng.integers(cfg.len_min, cfg.len_max + 1))
    deficit = _lifecycle(rng, n)

    lat = np.empty(n)
    lon = np.empty(n)
    lat[0] = rng.uniform(8.0, 25.0)
    lon[0] = rng.uniform(-180.0, 180.0)
    heading = np.deg2rad(rng.uniform(135.0, 215.0))
    recurve = np.deg2rad(rng.uniform(-170.0, -50.0))
    speed_base = rng.uniform(0.25, 0.5)
    phase = np.linspace(0.0, 1.0, n)
    for i in range(1, n):
        # deeper storms translate faster: couples motion to intensity
        speed = speed_base * (1.0 + 0.5 * deficit[i - 1] / 70.0)
        speed += rng.normal(0.0, cfg.track_noise * 0.1)
        speed = max(speed, 0.05)
        psi = heading + recurve * phase[i - 1] ** 2 \
            + rng.normal(0.0, cfg.track_noise * np.pi / 12.0)
        lon[i] = lon[i - 1] + speed * np.cos(psi)
        lat[i] = np.clip(lat[i - 1] + speed * np.sin(psi), -89.0, 89.0)

    pressure = cfg.p_env - deficit
    wind = np.maximum(
        cfg.wind_a * deficit ** cfg.wind_b + rng.normal(0.0, cfg.wind_noise, n), 0.0)
    attrs = np.stack([lat, lon, wind, pressure], axis=1)
    return Track(track_id=f"SYN{index:04d}", year=index,
                 times=np.arange(n, dtype=np.int64), attrs=attrs)


def _synth_env(rng: np.random.Generator, cfg: GenConfig, track: Track) -> np.ndarray:
    """(n, C, H, W) float32 fields whose blob displacement encodes motion."""
    n = len(track)
    c, h, w = cfg.channels, cfg.grid, cfg.grid
    motion = np.diff(track.attrs[:, 0:2], axis=0)
    motion = np.vstack([motion, motion[-1:]])  # last step repeats previous motion
    deficit = cfg.p_env - track.attrs[:, 3]

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sigma = h / 8.0
    fields = np.empty((n, c, h, w), dtype=np.float32)
    for i in range(n):
        amp = 1.0 + deficit[i] / 50.0
        for ch in range(c):
            frac = (ch + 1) / c
            cy = (h - 1) / 2.0 + cfg.advect_gain * motion[i, 0] * frac
            cx = (w - 1) / 2.0 + cfg.advect_gain * motion[i, 1] * frac
            blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
            fields[i, ch] = blob + rng.normal(0.0, cfg.env_noise, size=(h, w))
    return fields


def synth_dataset(cfg: GenConfig, seed: int) -> Dataset:
    """Generate a deterministic synthetic dataset from (cfg, seed)."""
    cfg.validate()
    tracks = []
    envs = []
    for i in range(cfg.n_tracks):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i])))
        track = _synth_track(rng, cfg, i)
        tracks.append(track)
        envs.append(_synth_env(rng, cfg, track))
    return Dataset(tracks=tracks, envs=envs, cfg=cfg)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


def make_windows(track: Track, env: np.ndarray, m: int, n: int) -> list[TrackWindow]:
    """Stride-1 sliding windows; count is max(0, len - m - n + 1)."""
    if m < 1 or n < 1:
        raise ConfigError(f"window sizes must be >= 1, got M={m}, N={n}")
    count = max(0, len(track) - m - n + 1)
    windows = []
    for k in range(count):
        windows.append(TrackWindow(
            track_id=track.track_id,
            year=track.year,
            origin_time=int(track.times[k + m - 1]),
            history=track.attrs[k:k + m],
            future=track.attrs[k + m:k + m + n],
            env_hist=env[k:k + m],
            env_fut=env[k + m:k + m + n],
            x_ref=track.attrs[k + m - 1, 0:2],
        ))
    return windows


def windows_of(tracks: list[Track], envs: list[np.ndarray], m: int, n: int
               ) -> list[TrackWindow]:
    out = []
    for track, env in zip(tracks, envs):
        out.extend(make_windows(track, env, m, n))
    return out


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def compute_norm_stats(tracks: list[Track], envs: list[np.ndarray]) -> NormStats:
    """Statistics from the training split only."""
    wind = np.concatenate([t.attrs[:, 2] for t in tracks])
    pres = np.concatenate([t.attrs[:, 3] for t in tracks])
    steps = np.concatenate([np.diff(t.attrs[:, 0:2], axis=0).ravel()
                            for t in tracks if len(t) > 1])
    env_flat = np.concatenate(
        [e.reshape(e.shape[0], e.shape[1], -1) for e in envs], axis=0)
    stats = NormStats(
        wind_mu=float(wind.mean()), wind_sigma=float(wind.std()),
        pres_mu=float(pres.mean()), pres_sigma=float(pres.std()),
        env_mu=env_flat.mean(axis=(0, 2)).astype(np.float64),
        env_sigma=env_flat.std(axis=(0, 2)).astype(np.float64),
        sigma_coord=float(steps.std()),
    )
    stats.validate()
    return stats


def normalize_attrs(attrs: np.ndarray, x_ref: np.ndarray, stats: NormStats) -> np.ndarray:
    """(…, 4) raw attributes -> (lat_rel, lon_rel, wind_norm, pres_norm)."""
    stats.validate()
    out = np.empty(attrs.shape, dtype=np.float64)
    out[..., 0] = (attrs[..., 0] - x_ref[..., 0, None]) / stats.sigma_coord
    out[..., 1] = (attrs[..., 1] - x_ref[..., 1, None]) / stats.sigma_coord
    out[..., 2] = (attrs[..., 2] - stats.wind_mu) / stats.wind_sigma
    out[..., 3] = (attrs[..., 3] - stats.pres_mu) / stats.pres_sigma
    return out


def denormalize_attrs(norm: np.ndarray, x_ref: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of normalize_attrs; longitude stays continuous."""
    stats.validate()
    out = np.empty(norm.shape, dtype=np.float64)
    out[..., 0] = norm[..., 0] * stats.sigma_coord + x_ref[..., 0, None]
    out[..., 1] = norm[..., 1] * stats.sigma_coord + x_ref[..., 1, None]
    out[..., 2] = norm[..., 2] * stats.wind_sigma + stats.wind_mu
    out[..., 3] = norm[..., 3] * stats.pres_sigma + stats.pres_mu
    return out


def normalize_env(env: np.ndarray, stats: NormStats) -> np.ndarray:
    """(…, C, H, W) -> z-scored per channel, float64."""
    mu = stats.env_mu.reshape(-1, 1, 1)
    sigma = stats.env_sigma.reshape(-1, 1, 1)
    return (env.astype(np.float64) - mu) / sigma


def collate(windows: list[TrackWindow], stats: NormStats) -> dict:
    """Stack normalized windows into batch arrays for the model."""
    x_ref = np.stack([w.x_ref for w in windows])
    hist = normalize_attrs(np.stack([w.history for w in windows]), x_ref, stats)
    fut = normalize_attrs(np.stack([w.future for w in windows]), x_ref, stats)
    env = np.concatenate(
        [np.stack([w.env_hist for w in windows]),
         np.stack([w.env_fut for w in windows])], axis=1)
    return {
        "hist": hist,
        "fut": fut,
        "env": normalize_env(env, stats),
        "x_ref": x_ref,
    }


# ---------------------------------------------------------------------------
# Chronological split
# ---------------------------------------------------------------------------


def chronological_split(tracks: list[Track], train_frac: float, val_frac: float
                        ) -> tuple[list[Track], list[Track], list[Track]]:
    """Split by storm year; a year never straddles two splits."""
    if not (0.0 < train_frac < 1.0 and 0.0 < val_frac < 1.0
            and train_frac + val_frac < 1.0):
        raise ConfigError(f"bad split fractions train={train_frac}, val={val_frac}")
    ordered = sorted(tracks, key=lambda t: t.year)
    n = len(ordered)
    b1 = int(np.floor(n * train_frac))
    b2 = int(np.floor(n * (train_frac + val_frac)))
    while 0 < b1 < n and ordered[b1 - 1].year == ordered[b1].year:
        b1 += 1
    b2 = max(b2, b1)
    while 0 < b2 < n and ordered[b2 - 1].year == ordered[b2].year:
        b2 += 1
    train, val, test = ordered[:b1], ordered[b1:b2], ordered[b2:]
    for name, part in [("train", train), ("val", val), ("test", test)]:
        if not part:
            raise ConfigError(f"chronological split leaves the {name} set empty "
                              f"(n={n}, train_frac={train_frac}, val_frac={val_frac})")
    return train, val, test


def split_dataset(ds: Dataset, train_frac: float, val_frac: float):
    """Split tracks and carry the aligned env arrays along."""
    env_by_id = {t.track_id: e for t, e in zip(ds.tracks, ds.envs)}
    parts = chronological_split(ds.tracks, train_frac, val_frac)
    return tuple((part, [env_by_id[t.track_id] for t in part]) for part in parts)


# ---------------------------------------------------------------------------
# Environment-field blobs (PDEF) and dataset directories
# ---------------------------------------------------------------------------


def write_env_blob(path, fields: np.ndarray) -> None:
    """fields (count, C, H, W) -> little-endian float32 blob with header."""
    fields = np.ascontiguousarray(fields, dtype="<f4")
    count, c, h, w = fields.shape
    with open(path, "wb") as fh:
        fh.write(_ENV_HEADER.pack(ENV_BLOB_MAGIC, ENV_BLOB_VERSION, c, h, w, count))
        fh.write(fields.tobytes())


def read_env_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_ENV_HEADER.size)
        if len(head) < _ENV_HEADER.size:
            raise ParseError(f"{path}: truncated PDEF header")
        magic, version, c, h, w, count = _ENV_HEADER.unpack(head)
        if magic != ENV_BLOB_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}, expected {ENV_BLOB_MAGIC!r}")
        if version != ENV_BLOB_VERSION:
            raise ParseError(f"{path}: unsupported PDEF version {version}")
        payload = fh.read()
    expected = count * c * h * w * 4
    if len(payload) != expected:
        raise ParseError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, c, h, w).copy()


def save_dataset(out_dir, ds: Dataset, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tracks.csv").write_text(format_best_track(ds.tracks))
    write_env_blob(out / "env.pdef", np.concatenate(ds.envs, axis=0))

    manifest = configparser.ConfigParser()
    manifest["generator"] = {f.name: repr(getattr(ds.cfg, f.name))
                             for f in dc_fields(ds.cfg)}
    manifest["generator"]["seed"] = str(seed)
    manifest["counts"] = {
        "n_tracks": str(len(ds.tracks)),
        "n_obs": str(sum(len(t) for t in ds.tracks)),
        "lengths": ",".join(str(len(t)) for t in ds.tracks),
    }
    with open(out / "manifest.ini", "w") as fh:
        manifest.write(fh)


def load_dataset(in_dir) -> tuple[Dataset, int]:
    src = Path(in_dir)
    manifest = configparser.ConfigParser()
    read = manifest.read(src / "manifest.ini")
    if not read:
        raise ParseError(f"{src}: missing manifest.ini")
    gen = dict(manifest["generator"])
    seed = int(gen.pop("seed"))
    known = {f.name: f.type for f in dc_fields(GenConfig)}
    unknown = set(gen) - set(known)
    if unknown:
        raise ParseError(f"{src}: unknown generator keys {sorted(unknown)}")
    kwargs = {}
    for name, raw in gen.items():
        caster = int if known[name] in (int, "int") else float
        try:
            kwargs[name] = caster(raw)
        except ValueError as exc:
            raise ParseError(f"{src}: bad generator value {name}={raw!r}") from exc
    cfg = GenConfig(**kwargs)

    tracks = parse_best_track((src / "tracks.csv").read_text())
    # synthetic track years are their indices; restore after the CSV round-trip
    for i, t in enumerate(tracks):
        if t.track_id.startswith("SYN"):
            t.year = int(t.track_id[3:])
    all_fields = read_env_blob(src / "env.pdef")
    lengths = [int(x) for x in manifest["counts"]["lengths"].split(",")]
    if sum(lengths) != all_fields.shape[0]:
        raise ParseError(f"{src}: env field count {all_fields.shape[0]} does not "
                         f"match manifest total {sum(lengths)}")
    envs = []
    offset = 0
    for n in lengths:
        envs.append(all_fields[offset:offset + n])
        offset += n
    return Dataset(tracks=tracks, envs=envs, cfg=cfg), seed
