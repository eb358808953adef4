"""One checkpoint container for every module kind.

A checkpoint is a torch-serialised dict with a format version, a module
kind tag, the resolved run config, the encoder-suite fingerprint, the
training step, and a kind-specific payload of state dicts. Loading a
checkpoint and rebuilding the module reproduces bitwise-identical forward
outputs.
"""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT_VERSION = 1
KINDS = ("encoder-suite", "stage1", "stage2")


def save_checkpoint(path: str | Path, kind: str, config: dict, payload: dict,
                    encoder_fingerprint: str, step: int = 0) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    blob = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "encoder_fingerprint": encoder_fingerprint,
        "step": int(step),
        "payload": payload,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if expect_kind is not None and blob.get("kind") != expect_kind:
        raise ValueError(
            f"{path}: expected a {expect_kind!r} checkpoint, found {blob.get('kind')!r}"
        )
    return blob


def check_fingerprint(blob: dict, fingerprint: str, path: str = "") -> None:
    if blob["encoder_fingerprint"] != fingerprint:
        raise ValueError(
            f"{path or 'checkpoint'} was trained against a different encoder "
            "suite (fingerprint mismatch); re-train or supply the matching suite"
        )
