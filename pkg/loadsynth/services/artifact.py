"""
Single-file model artifact: CVAE weights, normalization and the latent mixture.

Layout, all numbers little-endian:
  b"FDAY" | u16 format version | u32 header length | JSON header (sorted keys)
  | f8 blocks: normalization location, scale, output noise, encoder params, decoder params
    (declaration order)
  | b"GMM1" | u32 header length | JSON header | f8 blocks: weights, means, Cholesky factors
  | u32 CRC-32 of every preceding byte
"""
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from loadsynth import __version__
from loadsynth.exceptions import (
    ArtifactError,
    DatasetError,
    LayoutMismatchError,
    MixtureFitError,
    ShapeMismatchError,
)
from loadsynth.services.cvae import CvaeModel, LossWeights
from loadsynth.services.latent_gmm import LatentMixture
from loadsynth.services.nn_core import DenseNet
from loadsynth.services.profile_store import (
    LABEL_LAYOUT,
    N_PERIODS,
    LabelLayout,
    LabelVector,
    NormalizationParams,
)
from loadsynth.utils.file_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"FDAY"
MIXTURE_TAG = b"GMM1"
FORMAT_VERSION = 1
FLOAT = np.dtype("<f8")


@dataclass(frozen=True)
class ModelArtifact:
    model: CvaeModel
    mixture: LatentMixture
    checksum: int = 0

    @property
    def model_version(self) -> str:
        return f"{__version__}-{self.checksum:08x}"


def _json_bytes(document: dict) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _net_header(net: DenseNet) -> dict:
    return {
        "sizes": list(net.sizes),
        "activations": [a.value for a in net.activations],
        "output_activation": net.output_activation.value,
    }


def _blocks(arrays: Sequence[np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=FLOAT).tobytes() for a in arrays)


def encode_artifact(model: CvaeModel, mixture: LatentMixture) -> bytes:
    if mixture.latent_dim != model.latent_dim or mixture.label_layout.width != model.label_dim:
        raise LayoutMismatchError("mixture and model disagree on the latent or label width")
    header = _json_bytes({
        "format_version": FORMAT_VERSION,
        "latent_dim": model.latent_dim,
        "label_dim": model.label_dim,
        "encoder": _net_header(model.encoder),
        "decoder": _net_header(model.decoder),
        "loss_weights": {"mmd": model.loss_weights.mmd, "quantile": model.loss_weights.quantile},
        "normalization": {"scheme": model.normalization.scheme.value},
    })
    mixture_header = _json_bytes({
        "n_components": mixture.n_components,
        "dim": mixture.dim,
        "label_layout": mixture.label_layout.to_dict(),
        "population_counts": [
            [label.as_dict(), int(count)]
            for label, count in sorted(mixture.population_counts.items(), key=lambda kv: kv[0].sort_key())
        ],
        "total_households": mixture.total_households,
    })
    body = b"".join((
        MAGIC,
        struct.pack("<HI", FORMAT_VERSION, len(header)),
        header,
        _blocks([model.normalization.location, model.normalization.scale, model.output_noise]),
        _blocks(model.parameters()),
        MIXTURE_TAG,
        struct.pack("<I", len(mixture_header)),
        mixture_header,
        _blocks([mixture.weights, mixture.means, mixture.cholesky_factors]),
    ))
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ArtifactError("artifact is truncated")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self, length: int) -> dict:
        try:
            return json.loads(self.take(length).decode("utf-8"))
        except ValueError as e:
            raise ArtifactError(f"unreadable artifact header: {e}") from e

    def array(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * FLOAT.itemsize), dtype=FLOAT).reshape(shape).astype(np.float64)


def _read_net(reader: _Reader, spec: dict) -> DenseNet:
    sizes = [int(s) for s in spec["sizes"]]
    weights: List[np.ndarray] = []
    biases: List[np.ndarray] = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(reader.array((fan_in, fan_out)))
        biases.append(reader.array((fan_out,)))
    return DenseNet(sizes, weights, biases, spec["activations"], spec["output_activation"])


def decode_artifact(data: bytes) -> ModelArtifact:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise ArtifactError("not a model artifact (bad magic)")
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    checksum = zlib.crc32(body)
    if checksum != stored:
        raise ArtifactError("checksum mismatch")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    version, header_length = reader.unpack("<HI")
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported artifact format version {version}")
    try:
        header = reader.json(header_length)
        normalization = NormalizationParams(
            location=reader.array((N_PERIODS,)),
            scale=reader.array((N_PERIODS,)),
            scheme=header["normalization"]["scheme"],
        )
        output_noise = reader.array((N_PERIODS,))
        model = CvaeModel(
            encoder=_read_net(reader, header["encoder"]),
            decoder=_read_net(reader, header["decoder"]),
            latent_dim=int(header["latent_dim"]),
            normalization=normalization,
            loss_weights=LossWeights(**header["loss_weights"]),
            label_dim=int(header["label_dim"]),
            output_noise=output_noise,
        )
        if reader.take(len(MIXTURE_TAG)) != MIXTURE_TAG:
            raise ArtifactError("mixture section missing")
        (mixture_length,) = reader.unpack("<I")
        mixture_header = reader.json(mixture_length)
        k, d = int(mixture_header["n_components"]), int(mixture_header["dim"])
        layout = LabelLayout.from_dict(mixture_header["label_layout"])
        if layout != LABEL_LAYOUT:
            raise LayoutMismatchError("artifact label layout differs from this version's layout")
        mixture = LatentMixture(
            weights=reader.array((k,)),
            means=reader.array((k, d)),
            cholesky_factors=reader.array((k, d, d)),
            label_layout=layout,
            population_counts={LabelVector(**labels): int(count) for labels, count in mixture_header["population_counts"]},
            total_households=int(mixture_header["total_households"]),
        )
    except (KeyError, TypeError) as e:
        raise ArtifactError(f"malformed artifact header: {e}") from e
    except (ShapeMismatchError, DatasetError, MixtureFitError) as e:
        raise ArtifactError(f"inconsistent artifact contents: {e}") from e
    if reader.offset != len(body):
        raise ArtifactError("trailing bytes after the mixture section")
    if mixture.latent_dim != model.latent_dim:
        raise LayoutMismatchError("mixture dimension does not match the model's latent and label widths")
    return ModelArtifact(model, mixture, checksum)


def save_artifact(model: CvaeModel, mixture: LatentMixture, path: str) -> ModelArtifact:
    data = encode_artifact(model, mixture)
    atomic_write_bytes(path, data)
    checksum = struct.unpack("<I", data[-4:])[0]
    logger.info(f"Model artifact written to {path} ({len(data)} bytes, checksum {checksum:08x})")
    return ModelArtifact(model, mixture, checksum)


def load_artifact(path: str) -> ModelArtifact:
    if not os.path.exists(path):
        raise ArtifactError(f"model artifact not found: {path}")
    with open(path, "rb") as f:
        artifact = decode_artifact(f.read())
    logger.info(f"Loaded model {artifact.model_version} from {path}")
    return artifact
