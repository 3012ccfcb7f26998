"""File formats: binary PGM images, CSV tables, flat ``key = value`` configs."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM as float64 in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pix.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.float64))


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment. Duplicate keys are errors."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or key in out:
            raise ValueError(f"{path}:{n}: empty or duplicate key {key!r}")
        out[key] = value
    return out


# --- synthetic dataset directories --------------------------------------------

def save_pair(directory, pair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "source.pgm", pair.source)
    write_pgm(d / "target.pgm", pair.target)
    write_mask(d / "mask.pgm", pair.mask)
    write_csv(d / "keypoints.csv", ["x_src", "y_src", "x_tgt", "y_tgt"],
              np.concatenate([pair.kp_src, pair.kp_tgt], axis=1))
    t = pair.transform
    write_csv(d / "transform.csv", ["scale", "shift_x", "shift_y", "centre_x", "centre_y"],
              [[t.scale, *t.shift, *t.centre]])


def load_pair(directory):
    from .learn.synth import TrainPair, Transform

    d = Path(directory)
    kp = np.array([[float(r[k]) for k in ("x_src", "y_src", "x_tgt", "y_tgt")]
                   for r in read_csv(d / "keypoints.csv")]).reshape(-1, 4)
    t = read_csv(d / "transform.csv")[0]
    transform = Transform(float(t["scale"]), (float(t["shift_x"]), float(t["shift_y"])),
                          (float(t["centre_x"]), float(t["centre_y"])))
    return TrainPair(read_pgm(d / "source.pgm"), read_pgm(d / "target.pgm"), kp[:, :2], kp[:, 2:],
                     read_mask(d / "mask.pgm"), transform)


def load_dataset(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    return [load_pair(p) for p in sorted(d.iterdir()) if (p / "keypoints.csv").exists()]
