import numpy as np

from hazegen.imageio import resize_bilinear


def smooth_image(rng: np.random.Generator, size: int = 32, scale: float = 1.0) -> np.ndarray:
    """Low-frequency colour field with mild pixel noise, values in [0, 1]."""
    coarse = rng.uniform(0, 1, (4, 4, 3))
    img = resize_bilinear(coarse, size, size) + 0.05 * rng.standard_normal((size, size, 3))
    return np.clip(img * scale, 0.0, 1.0)


def bright_light_map(rng: np.random.Generator, size: int) -> np.ndarray:
    """Light map with mean >= 0.5: bright base plus a smooth colour wash."""
    wash = resize_bilinear(rng.uniform(0.0, 0.3, (3, 3, 3)), size, size)
    return np.clip(0.55 + wash, 0.0, 1.0)
