"""
CrossFundus Configuration
JSON run configuration: defaults, dot-notation access and load-time validation
"""

import copy
import difflib
import json
import logging
import os
from dataclasses import replace
from typing import Any, Dict, List, Optional

from cfa_fusion import CfaConfig
from errors import ConfigError
from model import ModelConfig
from synth_data import AugmentConfig, SynthConfig
from trainer import TrainConfig
from vit_encoder import StreamConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "crossfundus_config.json"

# fields whose default is null but which take a value of this type when set
_NULLABLE = {"cfa.d": int, "run.threads": int}


def _suggest(key: str, candidates: List[str]) -> str:
    match = difflib.get_close_matches(key, candidates, n=1, cutoff=0.6)
    return f"; did you mean '{match[0]}'?" if match else ""


def _leaf_paths(tree: Dict[str, Any], prefix: str = "") -> List[str]:
    paths = []
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            paths.extend(_leaf_paths(value, path + "."))
        else:
            paths.append(path)
    return paths


def _type_name(value: Any) -> str:
    return "null" if value is None else type(value).__name__


def _check_type(path: str, default: Any, value: Any) -> Any:
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"missing required field '{path}' (got null)", path)
    expected = _NULLABLE[path] if path in _NULLABLE else type(default)
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif expected is list:
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"'{path}' expects {expected.__name__}, got {_type_name(value)} {value!r}", path)
    return value


class CrossFundusConfig:
    """Run configuration: the JSON file laid over built-in defaults"""

    def __init__(self, config_file: Optional[str] = None, document: Optional[Dict[str, Any]] = None):
        self.config_file = config_file or DEFAULT_CONFIG_FILE
        self._explicit = config_file is not None
        self.config = self._get_default_config()
        self._merge(document if document is not None else self._load_file())
        self.validate()

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "CrossFundusConfig":
        return cls(document=document)

    def _load_file(self) -> Dict[str, Any]:
        if not os.path.exists(self.config_file):
            if self._explicit:
                raise ConfigError(f"config file not found: {self.config_file}")
            return {}
        try:
            with open(self.config_file) as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.config_file} is not valid JSON: {e}") from e
        logger.debug("loaded configuration from %s", self.config_file)
        return document

    def _get_default_config(self) -> Dict[str, Any]:
        """Default configuration"""
        train = TrainConfig().to_dict()
        train.pop("precision")
        return {
            "data": SynthConfig().to_dict(),
            "augment": AugmentConfig().to_dict(),
            "cfp_stream": StreamConfig().to_dict(),
            "ifp_stream": StreamConfig().to_dict(),
            "cfa": dict(CfaConfig().to_dict(), d=None),
            "model": {"streams": ["cf", "if"]},
            "train": train,
            "output": {
                "dir": "runs/default",
                "dataset_file": "dataset.cftd",
                "checkpoint": "checkpoint",
                "metrics_file": "metrics.json",
                "report_file": "report.html",
            },
            "run": {
                "strict": True,
                "threads": None,
                "precision": 32,
            },
        }

    def _merge(self, document: Any) -> None:
        if not isinstance(document, dict):
            raise ConfigError(f"configuration must be a JSON object, got {_type_name(document)}")
        self._merge_into(self.config, document, "")

    def _merge_into(self, target: Dict[str, Any], source: Dict[str, Any], prefix: str) -> None:
        for key, value in source.items():
            path = f"{prefix}{key}"
            if key not in target:
                raise ConfigError(f"unknown key '{path}'{self._suggestion(path, list(target), prefix)}", path)
            if isinstance(target[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"'{path}' expects an object, got {_type_name(value)}", path)
                self._merge_into(target[key], value, path + ".")
            else:
                target[key] = _check_type(path, target[key], value)

    def _suggestion(self, path: str, siblings: List[str], prefix: str) -> str:
        local = _suggest(path[len(prefix):], siblings)
        if local:
            return local.replace("'", f"'{prefix}", 1)
        return _suggest(path, _leaf_paths(self._get_default_config()))

    def validate(self) -> None:
        """Semantic checks; raises ConfigError naming the offending field"""
        self.synth_config().validate()
        model = self.model_config()
        model.validate()
        self.train_config().validate()
        data = self.config["data"]
        for name in ("cfp_stream", "ifp_stream"):
            stream = self.config[name]
            if (stream["H"], stream["W"], stream["C_in"]) != (data["H"], data["W"], data["C_in"]):
                raise ConfigError(f"{name} extents {stream['H']}x{stream['W']}x{stream['C_in']} differ from "
                                  f"data {data['H']}x{data['W']}x{data['C_in']}", f"{name}.H")
        threads = self.config["run"]["threads"]
        if threads is not None and threads < 1:
            raise ConfigError(f"run.threads must be >= 1, got {threads}", "run.threads")

    # Typed views

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.config["data"])

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.config["augment"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            cfp_stream=StreamConfig(**self.config["cfp_stream"]),
            ifp_stream=StreamConfig(**self.config["ifp_stream"]),
            cfa=CfaConfig(**self.config["cfa"]),
            k=self.config["data"]["k"],
            streams=tuple(self.config["model"]["streams"]),
        )

    def train_config(self) -> TrainConfig:
        train = dict(self.config["train"])
        train["lam"] = train.pop("lambda")
        return replace(TrainConfig(**train), precision=self.config["run"]["precision"])

    @property
    def strict(self) -> bool:
        return self.config["run"]["strict"]

    @property
    def threads(self) -> int:
        """Worker threads: 1 in strict mode, otherwise run.threads or CFT_THREADS"""
        if self.strict:
            return 1
        configured = self.config["run"]["threads"]
        if configured is None:
            try:
                configured = int(os.environ.get("CFT_THREADS", "1"))
            except ValueError as e:
                raise ConfigError(f"CFT_THREADS must be an integer, got {os.environ['CFT_THREADS']!r}") from e
        return max(1, configured)

    # Access

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by key (supports dot notation)"""
        value = self.config
        for k in key.split('.'):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def set(self, key: str, value: Any) -> bool:
        """Set a known key (dot notation); the result is re-validated"""
        keys = key.split('.')
        document: Dict[str, Any] = {}
        node = document
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
        candidate = copy.deepcopy(self.config)
        self._merge_into(candidate, document, "")
        previous, self.config = self.config, candidate
        try:
            self.validate()
        except ConfigError:
            self.config = previous
            raise
        return True

    def apply_override(self, assignment: str) -> None:
        """`key=value` with a JSON value; bare words are taken as strings"""
        if "=" not in assignment:
            raise ConfigError(f"override must look like key=value, got {assignment!r}")
        key, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set(key.strip(), value)

    def to_dict(self) -> Dict[str, Any]:
        """Resolved document: derived defaults such as cfa.d are written out"""
        document = copy.deepcopy(self.config)
        document["cfa"]["d"] = self.model_config().cfa.d
        return document

    def save_config(self, path: Optional[str] = None) -> str:
        """Write the fully resolved configuration"""
        path = path or self.config_file
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=False)
        return path


def parse_config(path: Optional[str]) -> CrossFundusConfig:
    """Load and validate a run configuration; None falls back to the default file if present"""
    return CrossFundusConfig(config_file=path)
