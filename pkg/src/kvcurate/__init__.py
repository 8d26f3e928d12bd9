"""Training-free KV-cache curation for long interleaved image generation, plus diagnostics."""

from .config import RunConfig, load_config
from .qkio import QkDump, read_dump, write_dump
from .sequence import Block, BlockKind, InterleavedSequence, build_sequence, load_sequence

__version__ = "0.1.0"

__all__ = [
    "Block", "BlockKind", "InterleavedSequence", "QkDump", "RunConfig", "build_sequence",
    "load_config", "load_sequence", "read_dump", "write_dump",
]
