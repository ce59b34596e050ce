"""
Model family: the text sieve, the multimodal disambiguator and their baselines.

All models share one topology skeleton; encoders are picked by `ModelKind`:

    text  (N, 50, 100)  -> char encoder(s) ---------------------------+
                                                                      +-> concat -> MLP
    audio (N, 300, 129) -> [CNN stack -> flatten | BiLSTM-Att] -> dense +
"""

import sys
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import InvalidConfig, ShapeError
from .labels import IntentLabel6, IntentLabel7, Label
from .layers import (
    BatchNorm,
    BiLstm,
    Conv2d,
    Dense,
    Embedding,
    MlpHead,
    Mode,
    Module,
    RngSeed,
    SelfAttention,
    Stream,
)
from .textenc import CharSequenceFeature

if sys.version_info >= (3, 10):
    from typing import TypeAlias
else:
    from typing_extensions import TypeAlias


class LabelSpace(str, Enum):
    SEVEN = "seven"
    SIX = "six"

    @property
    def labels(self) -> Type[Label]:
        return IntentLabel7 if self is LabelSpace.SEVEN else IntentLabel6

    @property
    def size(self) -> int:
        return len(self.labels)


class ModelKind(str, Enum):
    FCI = "fci"
    THREE_A = "3a"
    CHAR_CNN = "char-cnn"
    CHAR_BILSTM = "char-bilstm"
    CHAR_CNN_BILSTM = "char-cnn+char-bilstm"
    CHAR_BILSTM_ATT = "char-bilstm-att"
    CHAR_CNN_BILSTM_ATT = "char-cnn+char-bilstm-att"
    ONLY_SPEECH = "only-speech"
    ONLY_TEXT6 = "only-text6"

    def __str__(self) -> str:
        return self.value

    @property
    def uses_audio(self) -> bool:
        return self in (ModelKind.THREE_A, ModelKind.ONLY_SPEECH)

    @property
    def uses_text(self) -> bool:
        return self is not ModelKind.ONLY_SPEECH

    @property
    def label_space(self) -> LabelSpace:
        if self in (ModelKind.THREE_A, ModelKind.ONLY_SPEECH, ModelKind.ONLY_TEXT6):
            return LabelSpace.SIX
        return LabelSpace.SEVEN


BaselineKind: TypeAlias = ModelKind
BASELINE_KINDS = tuple(k for k in ModelKind if k not in (ModelKind.FCI, ModelKind.THREE_A))

# (kernel, filters, pool) per block, each block conv -> batchnorm -> ReLU -> pool -> dropout
AUDIO_CNN_BLOCKS: Tuple[Tuple[Tuple[int, int], int, Tuple[int, int]], ...] = (
    ((5, 5), 32, (2, 2)),
    ((5, 5), 64, (2, 2)),
    ((3, 3), 128, (2, 2)),
    ((3, 3), 32, (2, 1)),
    ((3, 3), 32, (2, 1)),
)
TEXT_CNN_FILTERS = 32
MLP_HIDDEN_CHOICES = (64, 128)

Shape = Tuple[int, ...]


@dataclass(frozen=True)
class ModelConfig:
    mlp_hidden: int = 128
    dropout: float = 0.3
    label_space: LabelSpace = LabelSpace.SEVEN
    fusion_proj_dim: int = 128
    text_len: int = 50
    text_dim: int = 100
    audio_frames: int = 300
    audio_bins: int = 129
    lstm_hidden: int = 64
    context_dim: int = 64
    vocab_size: int = 0  # > 0: trainable embedding over that many token ids
    zero_init_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "label_space", LabelSpace(self.label_space))
        if self.mlp_hidden not in MLP_HIDDEN_CHOICES:
            raise InvalidConfig(
                f"mlp_hidden must be one of {MLP_HIDDEN_CHOICES}: {self.mlp_hidden}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"dropout must be in [0, 1): {self.dropout}")
        for name in (
            "fusion_proj_dim",
            "text_len",
            "text_dim",
            "audio_frames",
            "audio_bins",
            "lstm_hidden",
            "context_dim",
        ):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive: {getattr(self, name)}")
        if self.vocab_size < 0:
            raise InvalidConfig(f"vocab_size must not be negative: {self.vocab_size}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["label_space"] = self.label_space.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def audio_cnn_shapes(frames: int, bins: int) -> List[Shape]:
    """Feature map shapes after each audio CNN block ("same" convolutions, floor pooling)."""
    shapes = []
    h, w = frames, bins
    for _, filters, (ph, pw) in AUDIO_CNN_BLOCKS:
        if ph > h or pw > w:
            raise ShapeError(f"Audio input ({frames}, {bins}) too small for the CNN stack")
        h, w = h // ph, w // pw
        shapes.append((h, w, filters))
    return shapes


def text_cnn_shapes(text_len: int, text_dim: int) -> List[Shape]:
    """Shapes after conv 3 x dim, pool 2 x 1 and conv 3 x 1 ("valid" convolutions)."""
    h = text_len - 2
    if h < 2:  # noqa: PLR2004
        raise ShapeError(f"Text length {text_len} too short for the character CNN")
    shapes: List[Shape] = [(h, 1, TEXT_CNN_FILTERS), (h // 2, 1, TEXT_CNN_FILTERS)]
    h = h // 2 - 2
    if h < 1:
        raise ShapeError(f"Text length {text_len} too short for the character CNN")
    shapes.append((h, 1, TEXT_CNN_FILTERS))
    return shapes


class TextInput(Module):
    """Pretrained vectors pass through; token ids go through a trainable embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.embedding = Embedding(cfg.vocab_size, cfg.text_dim, rng) if cfg.vocab_size else None

    def __call__(self, text: np.ndarray) -> Tensor:
        if self.embedding is not None:
            return self.embedding(text)
        return Tensor(text)


class CharBiLstmEncoder(Module):
    """Character BiLSTM pooled by context attention, or by its final states."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, *, attention: bool):
        super().__init__()
        self.bilstm = BiLstm(cfg.text_dim, cfg.lstm_hidden, rng)
        self.attention = (
            SelfAttention(self.bilstm.output_dim, cfg.context_dim, rng) if attention else None
        )
        self.output_dim = self.bilstm.output_dim

    def __call__(self, x: Tensor, mode: Mode, rng) -> Tensor:
        states = self.bilstm(x)
        if self.attention is None:
            return self.bilstm.last_states(states)
        pooled, _ = self.attention(states)
        return pooled

    def describe(self, name: str, cfg: ModelConfig) -> List[str]:
        seq = (cfg.text_len, cfg.text_dim)
        out = (cfg.text_len, self.output_dim)
        pooling = "attention" if self.attention is not None else "last states"
        return [
            f"{name}.bilstm: {seq} -> {out}",
            f"{name}.{pooling}: {out} -> ({self.output_dim},)",
        ]


class CharCnnEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d((3, cfg.text_dim), 1, TEXT_CNN_FILTERS, rng, padding="valid")
        self.conv2 = Conv2d((3, 1), TEXT_CNN_FILTERS, TEXT_CNN_FILTERS, rng, padding="valid")
        self.shapes = text_cnn_shapes(cfg.text_len, cfg.text_dim)
        self.output_dim = int(np.prod(self.shapes[-1]))
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, mode: Mode, rng) -> Tensor:
        n, steps, dim = x.shape
        x = ad.relu(self.conv1(ad.reshape(x, (n, steps, dim, 1))))
        x = ad.maxpool2d(x, (2, 1))
        x = ad.relu(self.conv2(x))
        return ad.dropout(ad.flatten(x), self.dropout, rng, training=mode is Mode.TRAIN)

    def describe(self, name: str, cfg: ModelConfig) -> List[str]:
        shape_in: Shape = (cfg.text_len, cfg.text_dim, 1)
        lines = []
        for layer, shape in zip(("conv 3x100", "pool 2x1", "conv 3x1"), self.shapes):
            lines.append(f"{name}.{layer}: {shape_in} -> {shape}")
            shape_in = shape
        lines.append(f"{name}.flatten: {shape_in} -> ({self.output_dim},)")
        return lines


class AudioCnn(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.shapes = audio_cnn_shapes(cfg.audio_frames, cfg.audio_bins)
        self.blocks: List[Tuple[Conv2d, BatchNorm, Tuple[int, int]]] = []
        channels = 1
        for i, (kernel, filters, pool) in enumerate(AUDIO_CNN_BLOCKS):
            conv = Conv2d(kernel, channels, filters, rng, padding="same")
            norm = BatchNorm(filters)
            setattr(self, f"conv{i}", conv)
            setattr(self, f"norm{i}", norm)
            self.blocks.append((conv, norm, pool))
            channels = filters
        self.output_dim = int(np.prod(self.shapes[-1]))
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, mode: Mode, rng) -> Tensor:
        n, frames, bins = x.shape
        x = ad.reshape(x, (n, frames, bins, 1))
        for conv, norm, pool in self.blocks:
            x = ad.maxpool2d(ad.relu(norm(conv(x), mode)), pool)
            x = ad.dropout(x, self.dropout, rng, training=mode is Mode.TRAIN)
        return ad.flatten(x)


class AudioEncoder(Module):
    """Audio CNN and audio BiLSTM-Att side by side, concatenated and projected."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cnn = AudioCnn(cfg, rng)
        self.bilstm = BiLstm(cfg.audio_bins, cfg.lstm_hidden, rng)
        self.attention = SelfAttention(self.bilstm.output_dim, cfg.context_dim, rng)
        joint = self.cnn.output_dim + self.bilstm.output_dim
        self.projection = Dense(joint, cfg.fusion_proj_dim, rng)
        self.output_dim = cfg.fusion_proj_dim

    def __call__(self, x: Tensor, mode: Mode, rng) -> Tensor:
        pooled, _ = self.attention(self.bilstm(x))
        joint = ad.concat([self.cnn(x, mode, rng), pooled], axis=-1)
        return ad.relu(self.projection(joint))

    def describe(self, name: str, cfg: ModelConfig) -> List[str]:
        shape_in: Shape = (cfg.audio_frames, cfg.audio_bins, 1)
        lines = []
        for i, shape in enumerate(self.cnn.shapes):
            lines.append(f"{name}.cnn.block{i}: {shape_in} -> {shape}")
            shape_in = shape
        seq = (cfg.audio_frames, cfg.audio_bins)
        lines.append(f"{name}.bilstm: {seq} -> ({cfg.audio_frames}, {self.bilstm.output_dim})")
        joint = self.cnn.output_dim + self.bilstm.output_dim
        lines.append(f"{name}.projection: ({joint},) -> ({self.output_dim},)")
        return lines


TextEncoderModule = Union[CharBiLstmEncoder, CharCnnEncoder]


def _text_encoders(
    kind: ModelKind, cfg: ModelConfig, rng: np.random.Generator
) -> List[TextEncoderModule]:
    if kind in (ModelKind.FCI, ModelKind.THREE_A, ModelKind.CHAR_BILSTM_ATT, ModelKind.ONLY_TEXT6):
        return [CharBiLstmEncoder(cfg, rng, attention=True)]
    if kind is ModelKind.CHAR_BILSTM:
        return [CharBiLstmEncoder(cfg, rng, attention=False)]
    if kind is ModelKind.CHAR_CNN:
        return [CharCnnEncoder(cfg, rng)]
    if kind is ModelKind.CHAR_CNN_BILSTM:
        return [CharCnnEncoder(cfg, rng), CharBiLstmEncoder(cfg, rng, attention=False)]
    if kind is ModelKind.CHAR_CNN_BILSTM_ATT:
        return [CharCnnEncoder(cfg, rng), CharBiLstmEncoder(cfg, rng, attention=True)]
    return []


class IntentClassifier(Module):
    """
    Classifier over the label space of `kind`.

    `forward` takes batched inputs: audio features (N, frames, bins) and text as pretrained
    character vectors (N, text_len, text_dim) or token ids (N, text_len). Inputs a kind doesn't
    use are ignored.
    """

    def __init__(self, kind: ModelKind, cfg: ModelConfig, seed: RngSeed = RngSeed()):
        super().__init__()
        kind = ModelKind(kind)
        if cfg.label_space is not kind.label_space:
            cfg = replace(cfg, label_space=kind.label_space)
        self.kind = kind
        self.config = cfg
        rng = seed.generator(Stream.INIT)
        self._dropout_rng = seed.generator(Stream.DROPOUT)

        fused = 0
        self.text_encoders = _text_encoders(kind, cfg, rng)
        if self.text_encoders:
            self.text_input = TextInput(cfg, rng)
        for i, encoder in enumerate(self.text_encoders):
            setattr(self, f"text{i}", encoder)
            fused += encoder.output_dim
        self.audio: Optional[AudioEncoder] = None
        if kind.uses_audio:
            self.audio = AudioEncoder(cfg, rng)
            fused += self.audio.output_dim
        self.fusion_dim = fused
        self.head = MlpHead(
            fused,
            cfg.mlp_hidden,
            cfg.label_space.size,
            rng,
            cfg.dropout,
            zero_init=cfg.zero_init_head,
        )
        self.bind_names()

    @property
    def labels(self) -> Type[Label]:
        return self.config.label_space.labels

    @property
    def n_classes(self) -> int:
        return self.config.label_space.size

    def _check_text(self, text: Optional[np.ndarray]) -> np.ndarray:
        cfg = self.config
        if text is None:
            raise ShapeError(f"Model '{self.kind}' needs a text input")
        text = np.asarray(text)
        if cfg.vocab_size:
            expected: Shape = (cfg.text_len,)
            integral = text.dtype.kind in "iu"
            if text.ndim != 2 or text.shape[1:] != expected or not integral:  # noqa: PLR2004
                raise ShapeError(f"Expected token ids (N, {cfg.text_len}), got {text.shape}")
        else:
            expected = (cfg.text_len, cfg.text_dim)
            if text.ndim != 3 or text.shape[1:] != expected:  # noqa: PLR2004
                raise ShapeError(f"Expected text features (N, *{expected}), got {text.shape}")
        return text

    def _check_audio(self, audio: Optional[np.ndarray]) -> np.ndarray:
        cfg = self.config
        if audio is None:
            raise ShapeError(f"Model '{self.kind}' needs an audio input")
        audio = np.asarray(audio, dtype=np.float64)
        expected = (cfg.audio_frames, cfg.audio_bins)
        if audio.ndim != 3 or audio.shape[1:] != expected:  # noqa: PLR2004
            raise ShapeError(f"Expected audio features (N, *{expected}), got {audio.shape}")
        return audio

    def fusion(
        self,
        audio: Optional[np.ndarray],
        text: Optional[np.ndarray],
        mode: Mode = Mode.INFER,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Concatenated encoder outputs fed to the MLP head, shape (N, fusion_dim)."""
        if mode is Mode.TRAIN and rng is None:
            rng = self._dropout_rng
        parts = []
        if self.text_encoders:
            x = self.text_input(self._check_text(text))
            parts.extend(encoder(x, mode, rng) for encoder in self.text_encoders)
        if self.audio is not None:
            parts.append(self.audio(Tensor(self._check_audio(audio)), mode, rng))
        n = {p.shape[0] for p in parts}
        if len(n) != 1:
            raise ShapeError(f"Audio and text batches differ in size: {sorted(n)}")
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)

    def forward(
        self,
        audio: Optional[np.ndarray],
        text: Optional[np.ndarray],
        mode: Mode = Mode.INFER,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Logits of shape (N, n_classes)."""
        if mode is Mode.TRAIN and rng is None:
            rng = self._dropout_rng
        return self.head(self.fusion(audio, text, mode, rng), mode, rng)

    def predict_proba(
        self, audio: Optional[np.ndarray], text: Optional[np.ndarray]
    ) -> np.ndarray:
        """Class probabilities (N, n_classes) in inference mode."""
        with no_grad():
            logits = self.forward(audio, text, Mode.INFER)
        return np.exp(ad.log_softmax(logits.data, axis=-1))

    def describe(self) -> List[str]:
        """Per-layer shape chain and parameter count."""
        cfg = self.config
        lines = [f"{self.kind}: {self.n_classes} classes, {self.count_parameters()} parameters"]
        for i, encoder in enumerate(self.text_encoders):
            lines.extend(encoder.describe(f"text{i}", cfg))
        if self.audio is not None:
            lines.extend(self.audio.describe("audio", cfg))
        lines.append(
            f"head: ({self.fusion_dim},) -> ({cfg.mlp_hidden},) -> ({self.n_classes},)"
        )
        return lines


FciModel: TypeAlias = IntentClassifier
MultiModalModel: TypeAlias = IntentClassifier


def build_fci(cfg: ModelConfig = ModelConfig(), seed: RngSeed = RngSeed()) -> FciModel:
    """Character BiLSTM-Att sieve over the seven-way label space."""
    return IntentClassifier(ModelKind.FCI, cfg, seed)


def build_three_a(cfg: ModelConfig = ModelConfig(), seed: RngSeed = RngSeed()) -> MultiModalModel:
    """Audio encoder and character BiLSTM-Att fused into a six-way classifier."""
    return IntentClassifier(ModelKind.THREE_A, cfg, seed)


def build_baseline(
    kind: BaselineKind, cfg: ModelConfig = ModelConfig(), seed: RngSeed = RngSeed()
) -> IntentClassifier:
    kind = ModelKind(kind)
    if kind not in BASELINE_KINDS:
        raise InvalidConfig(f"Not a baseline model kind: {kind}")
    return IntentClassifier(kind, cfg, seed)


def build_model(
    kind: Union[ModelKind, str], cfg: ModelConfig = ModelConfig(), seed: RngSeed = RngSeed()
) -> IntentClassifier:
    return IntentClassifier(ModelKind(kind), cfg, seed)


def _as_batch(x: Union[np.ndarray, CharSequenceFeature, Any]) -> np.ndarray:
    matrix = getattr(x, "matrix", x)
    return np.asarray(matrix)[None]


def fci_forward(
    feat: Union[CharSequenceFeature, np.ndarray],
    model: FciModel,
    mode: Mode = Mode.INFER,
) -> np.ndarray:
    """
    Seven-way probabilities of one utterance.

    Raises:
        ShapeError: If the feature shape doesn't match the model
    """
    if model.kind.uses_audio or model.n_classes != len(IntentLabel7):
        raise ShapeError(f"Model '{model.kind}' is not a text-only seven-way classifier")
    with no_grad():
        logits = model.forward(None, _as_batch(feat), mode)
    return np.exp(ad.log_softmax(logits.data, axis=-1))[0]


def three_a_forward(
    af: Any,
    cf: Optional[Union[CharSequenceFeature, np.ndarray]],
    model: MultiModalModel,
    mode: Mode = Mode.INFER,
) -> np.ndarray:
    """
    Six-way probabilities of one utterance from its acoustic and character features.

    Raises:
        ShapeError: If a feature shape doesn't match the model
    """
    if model.n_classes != len(IntentLabel6):
        raise ShapeError(f"Model '{model.kind}' is not a six-way classifier")
    audio = _as_batch(af) if model.kind.uses_audio else None
    text = _as_batch(cf) if model.kind.uses_text else None
    with no_grad():
        logits = model.forward(audio, text, mode)
    return np.exp(ad.log_softmax(logits.data, axis=-1))[0]


def predicted_labels(probs: np.ndarray, labels: Type[Label]) -> Sequence[Label]:
    """Argmax per row; equal probabilities resolve to the lowest class code."""
    return [labels(int(i)) for i in np.argmax(np.atleast_2d(probs), axis=-1)]
