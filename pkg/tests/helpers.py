"""Small builders shared by the test modules."""

import numpy as np
from hypothesis import strategies as st

from kvcurate.qkio import QkDump
from kvcurate.sequence import build_sequence


def random_dump(seq, layers=2, heads=4, head_dim=16, seed=0, q_shift=0.0, k_shift=0.0) -> QkDump:
    rng = np.random.default_rng(seed)
    shape = (layers, seq.total_tokens, heads, head_dim)
    q = rng.standard_normal(shape) + q_shift
    k = rng.standard_normal(shape) + k_shift
    return QkDump(q, k)


def simple_layout(m, text=4, vae=8, cur_text=4, cur_vae=8, vit=0):
    spec = []
    for i in range(1, m + 1):
        spec.append((i, "text", text))
        if vit:
            spec.append((i, "vit", vit))
        spec.append((i, "vae", vae))
    spec += [(m + 1, "text", cur_text), (m + 1, "vae", cur_vae)]
    return build_sequence(spec)


def random_layout_spec(rng, max_turns=25):
    """Random but valid (turn, kind, length) spec: optional preamble, ViT and special blocks,
    and occasional history turns without an image."""
    m = int(rng.integers(1, max_turns + 1))
    spec = []
    if rng.random() < 0.5:
        spec.append((0, "special", int(rng.integers(1, 3))))
    for i in range(1, m + 2):
        if rng.random() < 0.3:
            spec.append((i, "special", 1))
        spec.append((i, "text", int(rng.integers(1, 12))))
        if i <= m and rng.random() < 0.3:
            spec.append((i, "vit", int(rng.integers(1, 10))))
        if i == 1 or i == m + 1 or rng.random() < 0.9:
            spec.append((i, "vae", int(rng.integers(1, 24))))
    return spec


@st.composite
def layout_specs(draw, max_turns=8, max_len=12):
    """Hypothesis strategy for valid layout specs, ending with the current image."""
    length = st.integers(1, max_len)
    m = draw(st.integers(0, max_turns))
    spec = []
    if draw(st.booleans()):
        spec.append((0, "special", draw(length)))
    for i in range(1, m + 2):
        current = i == m + 1
        if draw(st.booleans()):
            spec.append((i, "special", draw(length)))
        if draw(st.booleans()) or not current:
            spec.append((i, "text", draw(length)))
        if not current and draw(st.booleans()):
            spec.append((i, "vit", draw(length)))
        if current or draw(st.integers(0, 4)) > 0:
            spec.append((i, "vae", draw(length)))
    return spec
