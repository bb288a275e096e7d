"""Field classes.

Includes all fields from `marshmallow.fields` in addition to the array fields
used by the treeood JSON formats and `DelimitedList`, which lets command line
flags such as ``--sizes 1000,2000`` load through the same schemas as JSON
config files.

.. code-block:: python

    from treeood import fields

    sizes = fields.DelimitedList(fields.Int()).deserialize("1000,2000")
    # [1000, 2000]
"""

from __future__ import annotations

import typing

import marshmallow as ma
import numpy as np

# Expose all fields from marshmallow.fields.
from marshmallow.fields import *  # noqa: F403

__all__ = ["DelimitedList", "EdgeList", "Matrix"] + ma.fields.__all__


class DelimitedFieldMixin:
    """
    This is a mixin class for subclasses of ma.fields.List which split on a
    pre-specified delimiter. By default, the delimiter will be ","

    Because we want the MRO to reach this class before the List class,
    it must be listed first in the superclasses.
    """

    delimiter: str = ","
    empty_value: typing.Any = ""

    def _serialize(self, value, attr, obj, **kwargs):
        return self.delimiter.join(
            format(each) for each in super()._serialize(value, attr, obj, **kwargs)
        )

    def _deserialize(self, value, attr, data, **kwargs):
        # JSON config files may hold a real list; the command line hands us a string
        if isinstance(value, (list, tuple)):
            return super()._deserialize(list(value), attr, data, **kwargs)
        if not isinstance(value, (str, bytes)):
            raise self.make_error("invalid")
        if isinstance(value, bytes):
            value = value.decode()
        values = [v.strip() for v in value.split(self.delimiter)] if value else []
        values = [v or self.empty_value for v in values]
        return super()._deserialize(values, attr, data, **kwargs)


class DelimitedList(DelimitedFieldMixin, ma.fields.List):
    """A field which is similar to a List, but also takes its input as a
    delimited string (e.g. "1000,2000,4000").

    :param Field cls_or_instance: A field class or instance.
    :param str delimiter: Delimiter between values.
    """

    default_error_messages = {"invalid": "Not a valid delimited list."}

    def __init__(
        self,
        cls_or_instance: ma.fields.Field | type,
        *,
        delimiter: str | None = None,
        **kwargs,
    ):
        self.delimiter = delimiter or self.delimiter
        super().__init__(cls_or_instance, **kwargs)


class Matrix(ma.fields.Field):
    """A 2-d real matrix, serialized as a list of rows and loaded as a
    float64 `numpy.ndarray`.

    :param int columns: Required column count, if fixed.
    """

    default_error_messages = {
        "invalid": "Not a valid matrix.",
        "ragged": "Matrix rows must all have the same length.",
        "columns": "Matrix must have {columns} columns.",
        "finite": "Matrix entries must be finite.",
    }

    def __init__(self, *, columns: int | None = None, **kwargs):
        self.columns = columns
        super().__init__(**kwargs)

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return np.asarray(value, dtype=np.float64).tolist()

    def _deserialize(self, value, attr, data, **kwargs):
        if not isinstance(value, (list, tuple)):
            raise self.make_error("invalid")
        if any(not isinstance(row, (list, tuple)) for row in value):
            raise self.make_error("invalid")
        if len({len(row) for row in value}) > 1:
            raise self.make_error("ragged")
        try:
            matrix = np.array(value, dtype=np.float64)
        except (TypeError, ValueError) as error:
            raise self.make_error("invalid") from error
        if matrix.ndim == 1:
            # only reachable for an empty list or a list of empty rows
            matrix = matrix.reshape(len(value), 0)
        if self.columns is not None and matrix.shape[1] != self.columns:
            raise self.make_error("columns", columns=self.columns)
        if not np.all(np.isfinite(matrix)):
            raise self.make_error("finite")
        return matrix


class EdgeList(ma.fields.Field):
    """Undirected edges as ``[[u, v], ...]``, loaded as an ``(m, 2)`` int64
    array. Canonicalization (dedup, self-loops) is left to
    `treeood.graph.Graph.from_edges`.
    """

    default_error_messages = {
        "invalid": "Not a valid edge list.",
        "pair": "Every edge must be a pair of non-negative integers.",
    }

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return np.asarray(value, dtype=np.int64).reshape(-1, 2).tolist()

    def _deserialize(self, value, attr, data, **kwargs):
        if not isinstance(value, (list, tuple)):
            raise self.make_error("invalid")
        for pair in value:
            if (
                not isinstance(pair, (list, tuple))
                or len(pair) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in pair)
                or min(pair) < 0
            ):
                raise self.make_error("pair")
        return np.array(value, dtype=np.int64).reshape(-1, 2)
