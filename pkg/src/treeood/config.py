"""Run configuration.

A `RunConfig` is always produced by `RunConfigSchema`, either from a JSON
file, from keyword overrides, or from both layered through
`treeood.overrides.ConfigProxy`:

.. code-block:: python

    from treeood.config import load_config

    config = load_config("run.json", {"k": 3, "lambda": 0.1})
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import typing

import marshmallow as ma
from marshmallow import validate

from treeood import fields
from treeood.exceptions import LoadError
from treeood.overrides import ConfigProxy

logger = logging.getLogger(__name__)

__all__ = ["OBJECTIVES", "RunConfig", "RunConfigSchema", "load_config"]

#: Loss variants: the full objective and the two single-term ablations
OBJECTIVES = ("full", "no_cri", "no_contrastive")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    k: int = 2
    r: int = 16
    hidden_dim: int = 32
    tau: float = 0.2
    lambda_: float = 0.01
    epochs_pretrain: int = 20
    epochs_testtime: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    objective: str = "full"
    workers: int = 1
    cache_dir: str | None = None
    degree_features: int | None = None
    dataset_format: str = "tud"
    id_train: str | None = None
    id_test: str | None = None
    ood_test: str | None = None

    def replace(self, **changes: typing.Any) -> RunConfig:
        """Return a copy with ``changes`` applied, validated by the schema."""
        data = RunConfigSchema().dump(self)
        data.update(
            {("lambda" if key == "lambda_" else key): value for key, value in changes.items()}
        )
        return RunConfigSchema().load(data)


_DEFAULTS = RunConfig()


class RunConfigSchema(ma.Schema):
    class Meta:
        unknown = ma.RAISE

    k = fields.Int(load_default=_DEFAULTS.k, validate=validate.Range(min=2, max=5))
    r = fields.Int(load_default=_DEFAULTS.r, validate=validate.Range(min=1))
    hidden_dim = fields.Int(
        load_default=_DEFAULTS.hidden_dim, validate=validate.Range(min=1)
    )
    tau = fields.Float(
        load_default=_DEFAULTS.tau, validate=validate.Range(min=0, min_inclusive=False)
    )
    lambda_ = fields.Float(
        data_key="lambda",
        load_default=_DEFAULTS.lambda_,
        validate=validate.Range(min=0, max=1),
    )
    epochs_pretrain = fields.Int(
        load_default=_DEFAULTS.epochs_pretrain, validate=validate.Range(min=0)
    )
    epochs_testtime = fields.Int(
        load_default=_DEFAULTS.epochs_testtime, validate=validate.Range(min=0)
    )
    lr = fields.Float(load_default=_DEFAULTS.lr, validate=validate.Range(min=0))
    batch_size = fields.Int(
        load_default=_DEFAULTS.batch_size, validate=validate.Range(min=2)
    )
    seed = fields.Int(load_default=_DEFAULTS.seed)
    objective = fields.Str(
        load_default=_DEFAULTS.objective, validate=validate.OneOf(OBJECTIVES)
    )
    workers = fields.Int(load_default=_DEFAULTS.workers, validate=validate.Range(min=1))
    cache_dir = fields.Str(load_default=None, allow_none=True)
    degree_features = fields.Int(
        load_default=None, allow_none=True, validate=validate.Range(min=1)
    )
    dataset_format = fields.Str(
        load_default=_DEFAULTS.dataset_format, validate=validate.OneOf(["tud", "json"])
    )
    id_train = fields.Str(load_default=None, allow_none=True)
    id_test = fields.Str(load_default=None, allow_none=True)
    ood_test = fields.Str(load_default=None, allow_none=True)

    @ma.post_load
    def make_config(self, data: dict[str, typing.Any], **kwargs: typing.Any) -> RunConfig:
        return RunConfig(**data)


def load_config(
    path: str | os.PathLike[str] | None = None,
    overrides: typing.Mapping[str, typing.Any] | None = None,
) -> RunConfig:
    """Load a `RunConfig` from an optional JSON file, with ``overrides``
    (e.g. command line flags) taking precedence over file values.

    :raises LoadError: if the file cannot be read or is not a JSON object.
    :raises marshmallow.ValidationError: if a value is out of range.
    """
    file_data: dict[str, typing.Any] | None = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fp:
                file_data = json.load(fp)
        except (OSError, json.JSONDecodeError) as error:
            raise LoadError(f"cannot read config file {path}: {error}") from error
        if not isinstance(file_data, dict):
            raise LoadError(f"config file {path} must hold a JSON object")
    schema = RunConfigSchema()
    proxy = ConfigProxy(overrides, file_data, schema=schema)
    if file_data:
        unknown = set(file_data) - proxy.known_keys
        if unknown:
            raise ma.ValidationError(
                {key: ["Unknown field."] for key in sorted(unknown)}
            )
    config = schema.load(dict(proxy))
    logger.debug("loaded %r", config)
    return config
