"""Static raster of the train/validation loss curves from a metrics CSV."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import FormatError

WIDTH, HEIGHT = 640, 400
# plot area (left, top, right, bottom) inside the canvas
PLOT_BOX = (70, 30, 610, 340)
TRAIN_COLOR = (31, 119, 180)
VAL_COLOR = (214, 39, 40)
AXIS_COLOR = (0, 0, 0)
BACKGROUND = (255, 255, 255)


def curve_points(values, vmin: float, vmax: float, box=PLOT_BOX) -> list[tuple[int, int]]:
    """Pixel vertices of a series; x spans the box evenly, larger values sit higher."""
    left, top, right, bottom = box
    n = len(values)
    span = vmax - vmin if vmax > vmin else 1.0
    pts = []
    for i, v in enumerate(values):
        x = left + (right - left) * (i / (n - 1) if n > 1 else 0.5)
        y = bottom - (bottom - top) * (v - vmin) / span
        pts.append((int(round(x)), int(round(y))))
    return pts


def _read_losses(metrics_csv):
    from .train import read_metrics  # deferred: train imports most of the package

    try:
        records = read_metrics(metrics_csv)
    except FileNotFoundError:
        raise FormatError(f"{metrics_csv}: file not found") from None
    if not records:
        raise FormatError(f"{metrics_csv}: no epochs recorded")
    epochs = [r.epoch for r in records]
    train = [r.train_loss for r in records]
    val = [r.val_loss for r in records]
    if not np.all(np.isfinite(train + val)):
        raise FormatError(f"{metrics_csv}: non-finite loss values")
    return epochs, train, val


def render_loss_curve(epochs, train, val) -> Image.Image:
    img = Image.new("RGB", (WIDTH, HEIGHT), BACKGROUND)
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    left, top, right, bottom = PLOT_BOX
    vmin, vmax = min(train + val), max(train + val)

    draw.line([(left, top), (left, bottom), (right, bottom)], fill=AXIS_COLOR, width=1)
    draw.text(((left + right) // 2 - 15, bottom + 28), "epoch", fill=AXIS_COLOR, font=font)
    draw.text((8, (top + bottom) // 2 - 6), "loss", fill=AXIS_COLOR, font=font)
    draw.text((left, bottom + 6), str(epochs[0]), fill=AXIS_COLOR, font=font)
    draw.text((right - 20, bottom + 6), str(epochs[-1]), fill=AXIS_COLOR, font=font)
    draw.text((8, top - 6), f"{vmax:.3g}", fill=AXIS_COLOR, font=font)
    draw.text((8, bottom - 6), f"{vmin:.3g}", fill=AXIS_COLOR, font=font)

    for series, color in ((val, VAL_COLOR), (train, TRAIN_COLOR)):
        pts = curve_points(series, vmin, vmax)
        if len(pts) > 1:
            draw.line(pts, fill=color, width=2)
        else:
            x, y = pts[0]
            draw.rectangle([x - 1, y - 1, x + 1, y + 1], fill=color)

    lx = right - 110
    draw.line([(lx, top + 8), (lx + 20, top + 8)], fill=TRAIN_COLOR, width=2)
    draw.text((lx + 26, top + 2), "train", fill=AXIS_COLOR, font=font)
    draw.line([(lx, top + 24), (lx + 20, top + 24)], fill=VAL_COLOR, width=2)
    draw.text((lx + 26, top + 18), "val", fill=AXIS_COLOR, font=font)
    return img


def emit_loss_curve(metrics_csv, out_path) -> Path:
    """Render the loss curves to PNG, or to grayscale PGM when ``out_path`` ends in .pgm."""
    epochs, train, val = _read_losses(metrics_csv)
    img = render_loss_curve(epochs, train, val)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() == ".pgm":
        img.convert("L").save(out_path, format="PPM")
    else:
        img.save(out_path, format="PNG")
    return out_path
