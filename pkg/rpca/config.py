"""Process-level settings for rpca."""
import json
import logging
import os
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "rpca_config.json"


class Config:
    """rpca settings: weight cache, device, logging, workers and the inference server."""

    def __init__(self, path: Optional[str] = None):
        # Weight cache and compute
        self.weights_dir: str = "./weights"
        self.device: str = "auto"
        self.num_workers: int = 0
        self.log_level: str = "INFO"

        # Inference server
        self.host: str = "0.0.0.0"
        self.port: int = 8000
        self.bearer_token: str = "mysecrettoken"
        self.checkpoint: Optional[str] = None

        self._load_from_file(Path(path) if path else Path(CONFIG_FILENAME))

    def _load_from_file(self, config_path: Path):
        """Load settings from rpca_config.json if it exists, then apply env overrides."""
        if config_path.exists():
            try:
                with open(config_path) as f:
                    data = json.load(f)

                self.weights_dir = data.get("weights_dir", self.weights_dir)
                self.device = data.get("device", self.device)
                self.num_workers = int(data.get("num_workers", self.num_workers))
                self.log_level = data.get("log_level", self.log_level)
                self.host = data.get("host", self.host)
                self.port = int(data.get("port", self.port))
                self.bearer_token = data.get("bearer_token", self.bearer_token)
                self.checkpoint = data.get("checkpoint", self.checkpoint)

            except Exception as e:
                logger.warning("Failed to load config from %s: %s", config_path, e)

        # Environment variables override file config
        self.weights_dir = os.getenv("RPCA_WEIGHTS_DIR", self.weights_dir)
        self.device = os.getenv("RPCA_DEVICE", self.device)
        self.num_workers = int(os.getenv("RPCA_NUM_WORKERS", str(self.num_workers)))
        self.log_level = os.getenv("RPCA_LOG_LEVEL", self.log_level)
        self.host = os.getenv("RPCA_HOST", self.host)
        self.port = int(os.getenv("RPCA_PORT", str(self.port)))
        self.bearer_token = os.getenv("RPCA_BEARER_TOKEN", self.bearer_token)
        self.checkpoint = os.getenv("RPCA_CHECKPOINT", self.checkpoint)

    def resolve_device(self) -> str:
        """Return the torch device string, auto-detecting cuda, then mps, then cpu."""
        if self.device != "auto":
            return self.device

        import torch

        if torch.cuda.is_available():
            logger.info("Using CUDA device")
            return "cuda"
        if hasattr(torch.backends, "mps") and torch.backends.mps.is_available():
            logger.info("Using MPS device")
            return "mps"
        logger.info("Using CPU device")
        return "cpu"

    def save_template(self, path: str = CONFIG_FILENAME):
        """Save a template configuration file."""
        template = {
            "weights_dir": self.weights_dir,
            "device": self.device,
            "num_workers": self.num_workers,
            "log_level": self.log_level,
            "host": self.host,
            "port": self.port,
            "bearer_token": self.bearer_token,
            "checkpoint": self.checkpoint,
            "_comment": "weights_dir holds <backbone>.safetensors files written by `rpca fetch-weights`. "
                        "device is auto, cpu, cuda or mps.",
        }
        with open(path, "w") as f:
            json.dump(template, f, indent=2)


# Global config instance
config = Config()
