from __future__ import annotations

import numpy as np
import pytest

from retroseq.normalize.lexer import code_tokens
from retroseq.pipeline.data import tokenize_intent
from retroseq.pipeline.neighbours import (
    as_values,
    get_query_chunk,
    precompute_neighbours,
    retrieve_chunk,
)
from retroseq.retrieve.datastore import (
    Database,
    EmptyDatabaseError,
    KeyKind,
    build_classic,
    build_hybrid,
)
from retroseq.tests import RetroSeqTest
from retroseq.util import EOS_ID, get_source_id

SNIPPET = "json.dumps(geodata, indent=2)"


class TestRetrieveChunk(RetroSeqTest):
    """Class to test retrieving the neighbours of one decoder chunk."""

    def setUp(self):
        self.db = build_classic([("dump it", SNIPPET)] + self.get_pairs(), 4)
        self.code_ids = self.db.encode_code(code_tokens(SNIPPET)) + [EOS_ID]

    def test_query_chunk(self):
        assert get_query_chunk(list(range(10)), 2, 4) == [0, 1, 2, 3]
        assert get_query_chunk(list(range(10)), 3, 4) == [4, 5, 6, 7]
        with pytest.raises(ValueError):
            get_query_chunk(list(range(10)), 1, 4)

    def test_verbatim_match(self):
        # same code under another intent, so another source id
        own_source = get_source_id("serialize geodata", SNIPPET)
        for chunk in (2, 3):
            found = retrieve_chunk(self.db, chunk, self.code_ids, [], 2, exclude_source=own_source)
            assert found.distances[0] == 0
            expected = self.code_ids[(chunk - 2) * 4 : (chunk - 1) * 4]
            assert found.records[0].neighbour.tolist() == expected
            assert get_source_id("dump it", SNIPPET) in {r.source_id for r in found.records}
            assert found.query == expected

    def test_exclusion(self):
        own_source = get_source_id("dump it", SNIPPET)
        found = retrieve_chunk(self.db, 3, self.code_ids, [], 2, exclude_source=own_source)
        assert all(r.source_id != own_source for r in found.records)
        assert found.distances[0] > 0

    def test_classic_first_chunk(self):
        found = retrieve_chunk(self.db, 1, self.code_ids, [], 2)
        assert not found.records
        assert as_values(found, 4).shape == (0, 8)

    def test_hybrid_first_chunk(self):
        pairs = [("dump `geodata` as json", SNIPPET)] + self.get_pairs()
        db = build_hybrid(pairs, 4)
        intent_ids = db.encode_intent(tokenize_intent("dump `geodata` as json"))
        found = retrieve_chunk(db, 1, [], intent_ids, 2)
        assert len(found.records) == 2
        assert all(r.key_kind == KeyKind.INTENT for r in found.records)
        assert found.distances[0] == 0
        code_ids = db.encode_code(code_tokens(SNIPPET)) + [EOS_ID]
        assert found.records[0].neighbour.tolist() == code_ids[:4]

        later = retrieve_chunk(db, 2, code_ids, intent_ids, 2)
        assert all(r.key_kind == KeyKind.CODE for r in later.records)

    def test_short_chunk(self):
        with pytest.raises(ValueError, match="needs 4 query tokens"):
            retrieve_chunk(self.db, 4, self.code_ids, [], 2)


class TestPrecomputeNeighbours(RetroSeqTest):
    """Class to test the neighbour cache."""

    def setUp(self):
        self.db = build_classic([("dump it", SNIPPET)] + self.get_pairs(), 4)
        self.code_ids = self.db.encode_code(code_tokens(SNIPPET)) + [EOS_ID]

    def test_cache(self):
        examples = [(self.code_ids, [], get_source_id("other", SNIPPET), [2, 3])]
        cache = precompute_neighbours(examples, self.db, 2)
        assert len(cache) == 1
        assert sorted(cache[0]) == [2, 3]
        values = cache.values(0)
        assert values[2].shape == (2, 8)
        assert values[2][0, :4].tolist() == self.code_ids[:4]
        assert cache.empty_count() == 0

    def test_matches_on_the_fly(self):
        examples = []
        for intent, snippet in self.get_pairs():
            ids = self.db.encode_code(code_tokens(snippet)) + [EOS_ID]
            chunks = list(range(2, -(-len(ids) // 4) + 1))
            examples.append((ids, [], get_source_id(intent, snippet), chunks))
        cache = precompute_neighbours(examples, self.db, 2)

        for entry, (ids, _, source_id, chunks) in zip(cache, examples):
            for u in chunks:
                direct = retrieve_chunk(self.db, u, ids, [], 2, exclude_source=source_id)
                assert np.array_equal(as_values(entry[u], 4), as_values(direct, 4))

    def test_same_source_only(self):
        db = build_classic([("dump it", SNIPPET)], 4)
        examples = [(self.code_ids, [], get_source_id("dump it", SNIPPET), [2, 3])]
        with pytest.warns(UserWarning, match="2 chunks have no neighbours"):
            cache = precompute_neighbours(examples, db, 2)
        assert not cache[0][2].records
        assert cache.values(0)[3].shape == (0, 8)
        assert cache.empty_count() == 2

    def test_empty_database(self):
        with pytest.raises(EmptyDatabaseError):
            precompute_neighbours([(self.code_ids, [], 0, [2])], Database(4), 2)
