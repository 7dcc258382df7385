"""File formats for grids and images.

Height rasters use the plain-text ESRI ASCII grid (.asc) with the
``NODATA_value`` sentinel; values are written with 17 significant digits
so a write/read round trip is bitwise exact for float64. Images use
binary PPM (P6, three channels) or PGM (P5, one channel) at 8 bits.
Geotransforms and small metadata blocks travel in ``key = value``
sidecar text files, and histograms as CSV.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from neuralterrain.grids import NODATA, GridSpec, TerrainGrid

__all__ = [
    "write_asc",
    "read_asc",
    "write_image",
    "read_image",
    "write_sidecar",
    "read_sidecar",
    "write_histogram_csv",
]


def write_asc(path, grid):
    """Write a :class:`TerrainGrid`'s heights as an ESRI ASCII raster."""
    spec = grid.spec
    lines = [
        f"ncols {spec.n_cols}",
        f"nrows {spec.n_rows}",
        f"xllcorner {spec.x_min:.17g}",
        f"yllcorner {spec.y_min:.17g}",
        f"cellsize {spec.cell_size:.17g}",
        f"NODATA_value {NODATA:.17g}",
    ]
    # File rows run north to south; memory row 0 is the southernmost.
    for row in range(spec.n_rows - 1, -1, -1):
        lines.append(" ".join(f"{v:.17g}" for v in grid.heights[row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_asc(path):
    """Read an ESRI ASCII raster into a :class:`TerrainGrid`."""
    text = Path(path).read_text().splitlines()
    header = {}
    body_start = 0
    for i, line in enumerate(text):
        parts = line.split()
        if len(parts) == 2 and parts[0][:1].isalpha():
            header[parts[0].lower()] = parts[1]
            body_start = i + 1
        else:
            break
    try:
        spec = GridSpec(
            x_min=float(header["xllcorner"]),
            y_min=float(header["yllcorner"]),
            cell_size=float(header["cellsize"]),
            n_cols=int(header["ncols"]),
            n_rows=int(header["nrows"]),
        )
    except KeyError as missing:
        raise ValueError(f"raster header lacks {missing} in {path}") from None
    nodata = float(header.get("nodata_value", NODATA))
    tokens = " ".join(text[body_start:]).split()
    if len(tokens) != spec.n_rows * spec.n_cols:
        raise ValueError(
            f"raster body has {len(tokens)} values, header promises "
            f"{spec.n_rows * spec.n_cols}"
        )
    heights = np.array(tokens, dtype=np.float64).reshape(spec.shape)
    heights = heights[::-1].copy()
    valid = np.isfinite(heights) & (heights != nodata)
    heights[~valid] = NODATA
    return TerrainGrid(spec, heights, valid)


def write_image(path, image):
    """Write a float image in ``[0, 1]`` as 8-bit PGM (P5) or PPM (P6).

    ``image`` may be ``[h, w]``, ``[h, w, 1]`` or ``[h, w, 3]``; the
    format follows the channel count.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError("image must be [h, w], [h, w, 1] or [h, w, 3]")
    h, w, channels = image.shape
    magic = "P5" if channels == 1 else "P6"
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_image(path):
    """Read a binary PGM/PPM into float64 ``[h, w, channels]`` in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0].decode(), *map(int, tokens[1:])
    if magic not in ("P5", "P6"):
        raise ValueError(f"unsupported image magic {magic!r} in {path}")
    if maxval != 255:
        raise ValueError("only 8-bit images are supported")
    channels = 1 if magic == "P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * channels, offset=pos)
    return data.reshape(h, w, channels).astype(np.float64) / 255.0


def _format_value(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_sidecar(path, spec=None, metadata=None):
    """Write a ``key = value`` sidecar with a geotransform and metadata."""
    pairs = {}
    if spec is not None:
        pairs.update(spec.to_dict())
    if metadata:
        pairs.update(metadata)
    lines = [f"{key} = {_format_value(value)}" for key, value in pairs.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path):
    """Read a sidecar back into a string-valued dict."""
    pairs = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def write_histogram_csv(path, bin_edges, bin_counts):
    """Write histogram bins as ``bin_left, bin_right, count`` rows."""
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    bin_counts = np.asarray(bin_counts)
    if bin_edges.size != bin_counts.size + 1:
        raise ValueError("need one more edge than counts")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i in range(bin_counts.size):
            writer.writerow(
                [f"{bin_edges[i]:.17g}", f"{bin_edges[i + 1]:.17g}",
                 int(bin_counts[i])]
            )
