from __future__ import annotations

import tempfile
import unittest
from collections.abc import Callable, Mapping
from pathlib import Path

import numpy as np

from retroseq.model.config import ModelConfig
from retroseq.tensor.engine import Tensor, grad, no_grad
from retroseq.util import special_tokens


class RetroSeqTest(unittest.TestCase):
    """Base test class providing access to common test data."""

    _test_pairs = [
        ("sort list `mylist` in place", "mylist.sort()"),
        ("count the occurrences of item 'x' in list `mylist`", "mylist.count('x')"),
        ("convert `geodata` to a json string", "json.dumps(geodata)"),
        ("get the length of list `items`", "len(items)"),
        ("reverse list `values`", "values[::-1]"),
        ("sum the elements of list `numbers`", "sum(numbers)"),
        ("print the string 'hello world'", "print('hello world')"),
        ("add 1 to every element of `data`", "[x + 1 for x in data]"),
        ("get the first element of `queue`", "queue[0]"),
        ("join the words in `words` with spaces", "' '.join(words)"),
        ("get the keys of dictionary `table`", "list(table.keys())"),
        ("split string `line` on commas", "line.split(',')"),
        ("read the lines of file 'data.txt'", "open('data.txt').readlines()"),
        ("get the maximum of `scores`", "max(scores)"),
        ("convert `text` to upper case", "text.upper()"),
        ("remove the last element of `stack`", "stack.pop()"),
    ]

    _code_words = [
        "(", ")", "[", "]", ".", ",", "=", "+", "-", ":", "0", "1",
        "var0", "var1", "var2", "str0", "lst0", "len", "sum", "print",
        "sort", "count", "json", "dumps", "max", "for", "in", "x",
    ]
    _nl_words = [
        "sort", "list", "var0", "var1", "str0", "lst0", "in", "place",
        "count", "the", "of", "get", "length", "to", "a", "string",
    ]

    @classmethod
    def get_pairs(cls) -> list[tuple[str, str]]:
        return list(cls._test_pairs)

    @classmethod
    def get_code_vocab(cls) -> list[str]:
        return list(special_tokens) + cls._code_words

    @classmethod
    def get_nl_vocab(cls) -> list[str]:
        return list(special_tokens) + cls._nl_words

    @classmethod
    def get_tiny_config(cls, **kwargs) -> ModelConfig:
        """Gets a small model configuration suitable for fast tests."""
        settings = dict(
            d_model=16,
            heads=2,
            nl_layers=1,
            neighbour_layers=1,
            decoder_layers=3,
            chunk_size=4,
            num_neighbours=2,
            aggregation_period=3,
            code_vocab=cls.get_code_vocab(),
            nl_vocab=cls.get_nl_vocab(),
        )
        settings.update(kwargs)
        return ModelConfig(**settings)

    @staticmethod
    def get_rng(seed: int = 0) -> np.random.Generator:
        return np.random.default_rng(seed)

    def get_temp_path(self, name: str) -> Path:
        """Gets a path in a temporary directory removed after the test."""
        if not hasattr(self, "_temp_dir"):
            self._temp_dir = tempfile.TemporaryDirectory()
            self.addCleanup(self._temp_dir.cleanup)
        return Path(self._temp_dir.name) / name

    def assert_gradients_match(
        self,
        loss_fn: Callable[[], Tensor],
        params: Mapping[str, Tensor],
        step: float = 1e-5,
        tolerance: float = 1e-4,
        max_coordinates: int | None = 24,
        seed: int = 0,
    ):
        """Compares taped gradients against central finite differences.

        Must be called inside a 64-bit ``precision`` block, with ``params``
        created in that block.

        Args:
            loss_fn: Recomputes the scalar loss from the current values of
                ``params``.
            params: The tensors to check, keyed by name.
            step: The finite-difference step.
            tolerance: Maximum relative error between the two gradients.
            max_coordinates: Number of randomly chosen coordinates checked per
                tensor, or ``None`` for all of them.
            seed: Seed used to choose the coordinates.
        """
        rng = np.random.default_rng(seed)
        analytic = grad(loss_fn(), params)

        for name, param in params.items():
            assert param.dtype == np.float64, f"{name} is not 64-bit"
            flat = param.data.reshape(-1)
            coordinates = np.arange(flat.size)
            if max_coordinates is not None and flat.size > max_coordinates:
                coordinates = rng.choice(flat.size, max_coordinates, replace=False)

            numeric = np.empty(len(coordinates))
            with no_grad():
                for i, coordinate in enumerate(coordinates):
                    original = flat[coordinate]
                    flat[coordinate] = original + step
                    plus = loss_fn().item()
                    flat[coordinate] = original - step
                    minus = loss_fn().item()
                    flat[coordinate] = original
                    numeric[i] = (plus - minus) / (2 * step)

            expected = analytic[name].reshape(-1)[coordinates]
            scale = max(np.linalg.norm(expected) + np.linalg.norm(numeric), 1e-8)
            error = np.linalg.norm(expected - numeric) / scale
            assert error < tolerance, f"gradient of {name} off by {error:.2e}"
