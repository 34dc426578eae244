"""Input validation helpers shared by the estimator API and the CLI."""

from __future__ import annotations

import os
from pathlib import Path

from .imageio import PreparedImage
from .ontology import Taxonomy, load_taxonomy, load_taxonomy_file


def check_images(X) -> list:
    """Coerce ``X`` to a list of raw image bytes or PreparedImage objects.

    Accepts bytes, PreparedImage or filesystem paths. A single item is not
    silently wrapped: pass a list.
    """
    if isinstance(X, (bytes, bytearray, str, os.PathLike, PreparedImage)):
        raise TypeError("expected a sequence of images, got a single image; wrap it in a list")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of images, got {type(X).__name__}") from None
    if not items:
        raise ValueError("no images given")
    out = []
    for pos, item in enumerate(items):
        if isinstance(item, PreparedImage):
            out.append(item)
        elif isinstance(item, (bytes, bytearray)):
            if not item:
                raise ValueError(f"image {pos} is empty")
            out.append(bytes(item))
        elif isinstance(item, (str, os.PathLike)):
            out.append(Path(item).read_bytes())
        else:
            raise TypeError(f"image {pos}: unsupported type {type(item).__name__}")
    return out


def check_image_ids(image_ids, n: int) -> list[str]:
    if image_ids is None:
        return [str(i) for i in range(n)]
    ids = [str(i) for i in image_ids]
    if len(ids) != n:
        raise ValueError(f"got {len(ids)} image ids for {n} images")
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    return ids


def check_taxonomy(taxonomy) -> Taxonomy:
    if isinstance(taxonomy, Taxonomy):
        return taxonomy
    if taxonomy is None:
        raise ValueError("a taxonomy is required")
    if isinstance(taxonomy, os.PathLike) or (isinstance(taxonomy, str) and "\n" not in taxonomy):
        return load_taxonomy_file(taxonomy)
    return load_taxonomy(taxonomy)
