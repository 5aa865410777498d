"""Image <-> latent codecs.

Desk-scale runs diffuse directly in pixel space through the identity
codec.  The protocol leaves room for a learned autoencoder; nothing in
this package requires one.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch


@runtime_checkable
class LatentCodec(Protocol):
    kind: str

    def encode(self, image: torch.Tensor) -> torch.Tensor: ...

    def decode(self, latent: torch.Tensor) -> torch.Tensor: ...


class IdentityCodec:
    """Pixel-space codec: encode and decode are bit-exact identities."""

    kind = "identity"

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent
