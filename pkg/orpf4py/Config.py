"""Run settings for orpf4py.

Settings live in the module-level ``CONFIG_DICT`` and are read and written
with ``getConfigVal``/``setConfigVal``. A JSON config file can be merged in
with ``loadDict``; command-line flags are applied on top of that by the cli.
"""
import copy
import hashlib
import json
import os

CONFIG_ENV_WORKERS = "ORPF4PY_WORKERS"

DEFAULT_DICT = {
    "format_version": 1,
    "s_base": 100.0,
    "seed": 42,
    "case_count": 50,
    "sampling": "pcg64",
    "objectives": ["B.U", "G.Q", "E.Q", "slack.P", "L.IS"],
    "taps": "heuristic",
    "tap_retry": True,
    "exhaustive_cap": 2000,
    "tol_stat": 1e-6,
    "tol_feas": 1e-8,
    "tol_comp": 1e-8,
    "max_iter": 200,
    "pf_tol": 1e-8,
    "pf_max_iter": 30,
    "warm_start": False,
    "workers": 1,
    "failure_flag_ratio": 0.05,
    "diagonal_tol": 1e-4,
    "e_q_setpoint": 0.0,
    "tilde_alpha": {"B.U": 10.0, "G.Q": 5.0, "E.Q": 5.0, "slack.P": 1.0, "L.IS": 0.0},
    "qlim_policy": "constant",
}

CONFIG_DICT = copy.deepcopy(DEFAULT_DICT)


class ConfigError(ValueError):
    """Raised for unknown keys or malformed config files."""


def getConfigVal(key):
    if key not in CONFIG_DICT:
        raise ConfigError("unknown config key: {}".format(key))
    return CONFIG_DICT[key]


def setConfigVal(key, val):
    if key not in DEFAULT_DICT:
        raise ConfigError("unknown config key: {}".format(key))
    CONFIG_DICT[key] = val


def initDict():
    """Reset the settings to their defaults and apply the environment.

    ``ORPF4PY_WORKERS`` is the only environment variable that is read.
    """
    CONFIG_DICT.clear()
    CONFIG_DICT.update(copy.deepcopy(DEFAULT_DICT))
    workers = os.environ.get(CONFIG_ENV_WORKERS)
    if workers:
        try:
            CONFIG_DICT["workers"] = max(1, int(workers))
        except ValueError:
            raise ConfigError("{} must be an integer, got {!r}".format(CONFIG_ENV_WORKERS, workers))


def loadDict(filePath):
    """Merge the settings stored in a JSON config file

    Parameters
    ----------
    filePath : str
        path of the config file

    Returns
    -------
    dict
        the merged settings
    """
    newDict = readDict(filePath)
    if not isinstance(newDict, dict):
        raise ConfigError("config file {} must hold a JSON object".format(filePath))
    unknown = sorted(set(newDict) - set(DEFAULT_DICT))
    if unknown:
        raise ConfigError("unknown config keys in {}: {}".format(filePath, ", ".join(unknown)))
    CONFIG_DICT.update(newDict)
    return CONFIG_DICT


def readDict(filePath):
    if not os.path.isfile(filePath):
        raise ConfigError("There is no config file at " + filePath)
    with open(filePath, "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError("config file {} is not valid JSON: {}".format(filePath, err))


def writeDict(dict, filePath):
    with open(filePath, "w") as f:
        f.write(json.dumps(dict, indent=2, sort_keys=True))
        f.write("\n")


def configHash(dict=None):
    """SHA-256 of the canonical JSON form of the settings."""
    text = json.dumps(CONFIG_DICT if dict is None else dict, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
