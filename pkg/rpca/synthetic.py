"""Procedurally generated coloured-shape images in the class-folder layout."""
import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

# class name → (RGB fill, shape)
SHAPE_CLASSES = {
    "red_disc": ((220, 30, 30), "disc"),
    "green_square": ((30, 200, 40), "square"),
    "blue_triangle": ((30, 60, 230), "triangle"),
    "yellow_bar": ((235, 220, 30), "bar"),
    "magenta_ring": ((210, 40, 210), "ring"),
}


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, fill, cx: float, cy: float, r: float):
    box = [cx - r, cy - r, cx + r, cy + r]
    if shape == "disc":
        draw.ellipse(box, fill=fill)
    elif shape == "square":
        draw.rectangle(box, fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    elif shape == "bar":
        draw.rectangle([cx - r, cy - r / 3, cx + r, cy + r / 3], fill=fill)
    elif shape == "ring":
        draw.ellipse(box, outline=fill, width=max(2, int(r / 3)))
    else:
        raise ValueError(f"Unknown shape '{shape}'")


def render_shape_image(class_name: str, rng: np.random.Generator, size: int = 96) -> Image.Image:
    """One image of ``class_name``: a jittered shape over a noisy grey background."""
    fill, shape = SHAPE_CLASSES[class_name]
    background = rng.normal(110, 25, size=(size, size, 3)).clip(0, 255).astype(np.uint8)
    image = Image.fromarray(background)
    draw = ImageDraw.Draw(image)
    r = rng.uniform(0.22, 0.38) * size
    cx, cy = rng.uniform(r, size - r, size=2)
    jitter = rng.integers(-20, 21, size=3)
    colour = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(fill, jitter))
    _draw_shape(draw, shape, colour, cx, cy, r)
    return image


def make_synthetic_dataset(
    root: Union[str, Path],
    per_class: int = 200,
    classes: Sequence[str] = tuple(SHAPE_CLASSES),
    size: int = 96,
    seed: int = 0,
) -> Path:
    """Write ``per_class`` PNGs for each class under ``root/<class>/``."""
    root = Path(root)
    for class_index, name in enumerate(classes):
        rng = np.random.default_rng([seed, class_index])
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            render_shape_image(name, rng, size).save(class_dir / f"{name}_{i:04d}.png")
    logger.info("Wrote %d synthetic images in %d classes to %s", per_class * len(classes), len(classes), root)
    return root
