"""Client workspace: one directory holding everything an installed capsule needs.

Layout::

    config.json     endpoint and policy (flags override these values)
    platform/       platform root key and, under enclave/<id>/, the sealed
                    layers, guard state, monotonic counter and query archive
    detector/       detector weights named by the policy, if any
    model.json      public model definition received at provisioning
    pending.json    request id of an unfinished classification, for retry

Every path is relative to the workspace root, so the directory can be moved or
copied as a unit.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .defense.redetect import DetectorModel
from .errors import ConfigError
from .protocol.program import DefenseConfig

ENV_WORKSPACE = "MLCAPSULE_WORKSPACE"
DEFAULT_WORKSPACE = "mlcapsule-workspace"
CONFIG_FORMAT = "mlcapsule-workspace"
DETECTOR_FILES = ("detector.json", "detector.mlcw")

POLICY_KEYS = ("threshold", "noise_c", "noise_T", "tau", "rho", "window", "detector", "ticket_pk")


def policy_defaults() -> dict:
    d = DefenseConfig()
    return {"threshold": d.threshold, "noise_c": d.noise_c, "noise_T": d.noise_T, "tau": d.tau,
            "rho": d.rho, "window": d.window, "detector": None, "ticket_pk": None}


def read_policy(path: Path | str) -> dict:
    """A policy document is a JSON object with any subset of ``POLICY_KEYS``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    doc = doc.get("policy", doc)
    unknown = set(doc) - set(POLICY_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown policy keys {sorted(unknown)}")
    if doc.get("detector") is not None:
        det = Path(doc["detector"])
        doc["detector"] = str(det if det.is_absolute() else (Path(path).parent / det).resolve())
    return doc


def load_detector(directory: Path | str) -> DetectorModel:
    d = Path(directory)
    return DetectorModel.load(d / DETECTOR_FILES[1], d / DETECTOR_FILES[0])


def defense_config(policy: dict, base: Path | None = None) -> DefenseConfig:
    """Build the measured DefenseConfig; a relative detector path resolves against ``base``."""
    p = {**policy_defaults(), **policy}
    det = None
    if p["detector"] is not None:
        path = Path(p["detector"])
        det = load_detector(path if path.is_absolute() or base is None else base / path)
    try:
        return DefenseConfig(
            threshold=None if p["threshold"] is None else int(p["threshold"]),
            noise_c=float(p["noise_c"]),
            noise_T=None if p["noise_T"] is None else tuple(float(t) for t in p["noise_T"]),
            tau=None if p["tau"] is None else float(p["tau"]),
            rho=float(p["rho"]),
            window=int(p["window"]),
            detector=det,
            ticket_pk=None if p["ticket_pk"] is None else bytes.fromhex(p["ticket_pk"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad policy value: {exc}") from None


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class WorkspaceConfig:
    endpoint: str | None = None
    policy: dict = field(default_factory=policy_defaults)

    def to_json(self) -> str:
        return json.dumps({"format": CONFIG_FORMAT, "version": 1, "endpoint": self.endpoint,
                           "policy": self.policy}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "WorkspaceConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"workspace config is not valid JSON: {exc}") from None
        if doc.get("format") != CONFIG_FORMAT or doc.get("version") != 1:
            raise ConfigError("not a version 1 workspace config")
        return cls(doc.get("endpoint"), {**policy_defaults(), **doc.get("policy", {})})


class Workspace:
    def __init__(self, root: Path | str | None = None):
        self.root = Path(root or os.environ.get(ENV_WORKSPACE) or DEFAULT_WORKSPACE)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def platform_dir(self) -> Path:
        return self.root / "platform"

    @property
    def model_path(self) -> Path:
        return self.root / "model.json"

    @property
    def pending_path(self) -> Path:
        return self.root / "pending.json"

    @property
    def detector_dir(self) -> Path:
        return self.root / "detector"

    def exists(self) -> bool:
        return self.config_path.exists()

    def config(self) -> WorkspaceConfig:
        if not self.exists():
            raise ConfigError(f"no workspace at {self.root}; run 'client obtain' first")
        return WorkspaceConfig.from_json(self.config_path.read_text())

    def save_config(self, cfg: WorkspaceConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(cfg.to_json())

    def adopt_detector(self, policy: dict) -> dict:
        """Copy the policy's detector into the workspace and point the policy at the copy."""
        if policy.get("detector") is None:
            return policy
        src = Path(policy["detector"])
        if not src.is_absolute():
            src = self.root / src
        if src.resolve() != self.detector_dir.resolve():
            self.detector_dir.mkdir(parents=True, exist_ok=True)
            for name in DETECTOR_FILES:
                shutil.copyfile(src / name, self.detector_dir / name)
        return {**policy, "detector": "detector"}

    def defense(self, cfg: WorkspaceConfig | None = None) -> DefenseConfig:
        return defense_config((cfg or self.config()).policy, self.root)

    def platform(self) -> crypto.Platform:
        return crypto.Platform.open(self.platform_dir)

    # -- retry bookkeeping --------------------------------------------------------

    def pending_request(self, input_digest: bytes) -> bytes:
        """Reuse the request id of an interrupted run on the same input, else start a new one."""
        if self.pending_path.exists():
            try:
                doc = json.loads(self.pending_path.read_text())
                if doc.get("input") == input_digest.hex():
                    return bytes.fromhex(doc["request_id"])
            except (json.JSONDecodeError, KeyError, ValueError):
                pass
        rid = os.urandom(16)
        tmp = self.pending_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"input": input_digest.hex(), "request_id": rid.hex()}))
        os.replace(tmp, self.pending_path)
        return rid

    def clear_pending(self) -> None:
        self.pending_path.unlink(missing_ok=True)
