"""Crop geometry, and the only place pixels get touched."""
import io
import math
from pathlib import Path
from typing import Iterable, List, Sequence, Union

from PIL import Image

from vdr.trajectory import BoundingBox, CropSpec, EntityRegion, ImageRef


def clamp_box(box: BoundingBox, width: int, height: int) -> BoundingBox:
    """Clamp a box to the image; raises ValueError when nothing is left."""
    x0, y0 = min(max(box.x0, 0), width), min(max(box.y0, 0), height)
    x1, y1 = min(max(box.x1, 0), width), min(max(box.y1, 0), height)
    if x0 >= x1 or y0 >= y1:
        raise ValueError(f"degenerate crop {box.as_list()} in {width}x{height} image")
    return BoundingBox(x0, y0, x1, y1)


def expand_box(box: BoundingBox, scale: float, width: int, height: int) -> BoundingBox:
    """Grow (or shrink) `box` about its center by `scale`, then clamp to the image."""
    if not scale > 0:
        raise ValueError(f"crop scale must be positive, got {scale}")
    cx, cy = (box.x0 + box.x1) / 2, (box.y0 + box.y1) / 2
    half_w, half_h = box.width * scale / 2, box.height * scale / 2
    expanded = BoundingBox(
        math.floor(cx - half_w), math.floor(cy - half_h),
        math.ceil(cx + half_w), math.ceil(cy + half_h),
    )
    return clamp_box(expanded, width, height)


def expand_crop(crop: CropSpec, image: ImageRef) -> BoundingBox:
    return expand_box(crop.box, crop.scale, image.width, image.height)


def crop_image(image: ImageRef, box: BoundingBox) -> ImageRef:
    """
    Cut `box` out of `image`.

    Pixel payloads are cropped with Pillow and re-encoded as PNG. Simulated
    images keep the part of every entity region that falls inside the box,
    in crop coordinates.
    """
    if not box.is_valid_for(image.width, image.height):
        raise ValueError(f"box {box.as_list()} is outside {image.width}x{image.height} image {image.id}")
    crop_id = f"{image.id}@{box.x0},{box.y0},{box.x1},{box.y1}"
    if image.is_sim:
        regions = []
        for region in image.regions:
            overlap = region.box.intersect(box)
            if overlap is None:
                continue
            local = BoundingBox(overlap.x0 - box.x0, overlap.y0 - box.y0,
                                overlap.x1 - box.x0, overlap.y1 - box.y0)
            regions.append(EntityRegion(region.name, region.kind, region.descriptor, local))
        return ImageRef(crop_id, box.width, box.height, regions=tuple(regions))

    with Image.open(io.BytesIO(image.payload)) as pixels:
        cropped = pixels.crop((box.x0, box.y0, box.x1, box.y1))
        buffer = io.BytesIO()
        cropped.save(buffer, format="PNG")
    return ImageRef(crop_id, box.width, box.height, payload=buffer.getvalue())


def multi_scale_crops(boxes: Iterable[BoundingBox], scales: Sequence[float]) -> List[CropSpec]:
    """Every box at every scale, box-major."""
    return [CropSpec(box, float(scale)) for box in boxes for scale in scales]


def image_from_file(path: Union[str, Path], image_id: str = "") -> ImageRef:
    data = Path(path).read_bytes()
    with Image.open(io.BytesIO(data)) as pixels:
        width, height = pixels.size
    return ImageRef(image_id or Path(path).stem, width, height, payload=data)
