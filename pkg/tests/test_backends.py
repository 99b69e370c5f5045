import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from visprompt import proposals
from visprompt.backends import (ColorRegionSegmenter, DiskCache, FixtureScorer,
                                FixtureSegmenter, ProtocolError, RemoteConfig,
                                RemoteScorer, RemoteSegmenter)
from visprompt.imagecore import Box
from visprompt.proposals import SegmentationError

from conftest import random_image, solid


class TestFixtureScorer:
    def test_same_bytes_same_vector(self, rng):
        img = random_image(rng, 6, 6)
        backend = FixtureScorer(seed=11)
        assert np.array_equal(backend.embed_image(img), backend.embed_image(img.copy()))

    def test_different_seeds_differ(self, rng):
        img = random_image(rng, 6, 6)
        a = FixtureScorer(seed=1).embed_image(img)
        b = FixtureScorer(seed=2).embed_image(img)
        assert not np.allclose(a, b)

    def test_programmed_pair_exact(self, rng):
        backend = FixtureScorer(dim=3)
        img = random_image(rng, 4, 4)
        vec = np.array([0.0, 1.0, 0.0])
        backend.program_image(img, vec)
        assert np.array_equal(backend.embed_image(img), vec)

    def test_unit_norm(self, rng):
        backend = FixtureScorer()
        for _ in range(5):
            v = backend.embed_image(random_image(rng, 5, 5))
            assert abs(np.linalg.norm(v) - 1.0) < 1e-6
        t = backend.embed_text("some caption")
        assert abs(np.linalg.norm(t) - 1.0) < 1e-6

    def test_text_and_image_spaces_distinct(self):
        backend = FixtureScorer()
        img = solid(1, 5, (97, 98, 99))
        assert not np.allclose(backend.embed_image(img), backend.embed_text("abc"))


class TestFixtureSegmenter:
    def test_box_interiors(self, rng):
        img = random_image(rng, 10, 10)
        masks = FixtureSegmenter().segment_boxes(img, [Box(1, 2, 3, 4)])
        assert len(masks) == 1
        mask, quality = masks[0]
        assert quality == 1.0
        assert int(mask.sum()) == 12

    def test_point_patches_centered(self, rng):
        img = random_image(rng, 32, 32)
        (mask, _), = FixtureSegmenter().segment_points(img, [(16.0, 16.0)])
        box = proposals.box_from_mask(mask)
        assert abs(box.cx - 16) <= 1 and abs(box.cy - 16) <= 1


class TestColorRegionSegmenter:
    def test_box_query_returns_colored_region(self):
        img = solid(20, 20, (10, 10, 10))
        img[5:12, 4:15] = (200, 30, 30)
        (mask, _), = ColorRegionSegmenter().segment_boxes(img, [Box(4, 5, 11, 7)])
        want = np.zeros((20, 20), dtype=bool)
        want[5:12, 4:15] = True
        assert np.array_equal(mask, want)

    def test_point_query_component(self):
        img = solid(16, 16, (0, 0, 0))
        img[2:6, 2:6] = (9, 9, 9)
        (mask, quality), = ColorRegionSegmenter().segment_points(img, [(3.0, 3.0)])
        assert int(mask.sum()) == 16
        assert quality == 1.0


class TestDiskCache:
    def test_put_get_round_trip(self, tmp_path):
        cache = DiskCache(tmp_path / "cache")
        cache.put("ab" * 32, [1.0, 2.5, -3.25])
        assert cache.get("ab" * 32) == [1.0, 2.5, -3.25]

    def test_absent_key_misses(self, tmp_path):
        assert DiskCache(tmp_path).get("cd" * 32) is None

    def test_truncated_entry_is_miss(self, tmp_path):
        cache = DiskCache(tmp_path)
        key = "ef" * 32
        cache.put(key, {"a": 1})
        path = cache._path(key)
        path.write_bytes(path.read_bytes()[:10])
        assert cache.get(key) is None

    def test_corrupted_value_fails_checksum(self, tmp_path):
        cache = DiskCache(tmp_path)
        key = "12" * 32
        cache.put(key, [1, 2, 3])
        path = cache._path(key)
        entry = json.loads(path.read_text())
        entry["value"] = [9, 9, 9]
        path.write_text(json.dumps(entry))
        assert cache.get(key) is None

    def test_unwritable_root_disables(self):
        cache = DiskCache("/proc/definitely/not/writable")
        assert not cache.enabled
        cache.put("aa" * 32, [1])  # must not raise
        assert cache.get("aa" * 32) is None

    def test_stats_and_clear(self, tmp_path):
        cache = DiskCache(tmp_path)
        cache.put("11" * 32, [1])
        cache.put("22" * 32, [2])
        stats = cache.stats()
        assert stats["entries"] == 2 and stats["bytes"] > 0
        assert cache.clear() == 2
        assert cache.stats()["entries"] == 0

    def test_key_derivation_order_sensitive(self):
        assert DiskCache.key("a", "b") != DiskCache.key("b", "a")
        assert DiskCache.key(b"ab") != DiskCache.key(b"a", b"b")


class _StubHandler(BaseHTTPRequestHandler):
    """Minimal wire-protocol server with request counting and fault injection."""

    def log_message(self, *args):
        pass

    def _reply(self, code, payload):
        body = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        state = self.server.state
        state["calls"].append(("GET", self.path))
        if self.path == "/v1/health":
            self._reply(200, {"ok": True, "models": {"scorer": "stub-s1", "segmenter": "stub-g1"}})
        else:
            self._reply(404, {"error": "no such endpoint"})

    def do_POST(self):
        state = self.server.state
        state["calls"].append(("POST", self.path))
        length = int(self.headers.get("Content-Length", 0))
        request = json.loads(self.rfile.read(length)) if length else {}
        if state["fail_next"] > 0:
            state["fail_next"] -= 1
            self._reply(500, {"error": "injected failure"})
            return
        if self.path in ("/v1/embed_image", "/v1/embed_text"):
            dim = state["dim"]
            vec = [1.0] + [0.0] * (dim - 1)
            payload = {"embedding": vec, "dim": state.get("claim_dim", dim), "model": "stub-s1"}
            if state.get("bad_norm"):
                payload["embedding"] = [2.0] + [0.0] * (dim - 1)
            self._reply(200, payload)
        elif self.path == "/v1/segment":
            queries = request.get("boxes") or request.get("points") or []
            h, w = state["mask_shape"]
            masks = []
            for _ in queries:
                mask = np.zeros((h, w), dtype=bool)
                mask[1:3, 1:3] = True
                rle = proposals.rle_encode(mask)
                rle["quality"] = 0.75
                masks.append(rle)
            self._reply(200, {"masks": masks})
        else:
            self._reply(404, {"error": "no such endpoint"})


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    server.state = {"calls": [], "fail_next": 0, "dim": 8, "mask_shape": (6, 6)}
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()
    thread.join(timeout=2)


def _url(server):
    return f"http://127.0.0.1:{server.server_address[1]}"


class TestRemoteScorer:
    def test_embed_round_trip(self, stub_server, rng):
        scorer = RemoteScorer(RemoteConfig(base_url=_url(stub_server), backoff=0.0))
        vec = scorer.embed_image(random_image(rng, 4, 4))
        assert vec.shape == (8,)
        assert vec[0] == 1.0

    def test_health_tags(self, stub_server):
        scorer = RemoteScorer(RemoteConfig(base_url=_url(stub_server)))
        health = scorer.health()
        assert health["models"] == {"scorer": "stub-s1", "segmenter": "stub-g1"}

    def test_malformed_dim_is_protocol_error_and_no_cache_write(self, stub_server, rng, tmp_path):
        cache = DiskCache(tmp_path)
        stub_server.state["claim_dim"] = 99
        scorer = RemoteScorer(RemoteConfig(base_url=_url(stub_server), backoff=0.0, cache=cache))
        with pytest.raises(ProtocolError, match="embed_image"):
            scorer.embed_image(random_image(rng, 4, 4))
        assert cache.stats()["entries"] == 0

    def test_bad_norm_rejected(self, stub_server, rng):
        stub_server.state["bad_norm"] = True
        scorer = RemoteScorer(RemoteConfig(base_url=_url(stub_server), backoff=0.0))
        with pytest.raises(ProtocolError, match="norm"):
            scorer.embed_image(random_image(rng, 4, 4))

    def test_retry_then_success(self, stub_server, rng):
        stub_server.state["fail_next"] = 1
        scorer = RemoteScorer(RemoteConfig(base_url=_url(stub_server), retries=3, backoff=0.0))
        vec = scorer.embed_image(random_image(rng, 4, 4))
        assert vec[0] == 1.0

    def test_exhausted_retries_raise_with_attempts(self, stub_server, rng):
        stub_server.state["fail_next"] = 10
        scorer = RemoteScorer(RemoteConfig(base_url=_url(stub_server), retries=2, backoff=0.0))
        with pytest.raises(ProtocolError) as err:
            scorer.embed_text("hello")
        assert err.value.attempts == 2

    def test_cache_hit_skips_network(self, stub_server, rng, tmp_path):
        cache = DiskCache(tmp_path)
        config = RemoteConfig(base_url=_url(stub_server), backoff=0.0, cache=cache)
        scorer = RemoteScorer(config)
        img = random_image(rng, 4, 4)
        first = scorer.embed_image(img)
        embed_calls = [c for c in stub_server.state["calls"] if c[1] == "/v1/embed_image"]
        assert len(embed_calls) == 1
        second = scorer.embed_image(img)
        embed_calls = [c for c in stub_server.state["calls"] if c[1] == "/v1/embed_image"]
        assert len(embed_calls) == 1  # exactly one network call
        assert np.array_equal(first, second)


class TestRemoteSegmenter:
    def test_segment_boxes_round_trip(self, stub_server, rng):
        stub_server.state["mask_shape"] = (6, 6)
        seg = RemoteSegmenter(RemoteConfig(base_url=_url(stub_server), backoff=0.0))
        img = random_image(rng, 6, 6)
        out = seg.segment_boxes(img, [Box(0, 0, 3, 3), Box(2, 2, 3, 3)])
        assert len(out) == 2
        mask, quality = out[0]
        assert quality == 0.75
        assert int(mask.sum()) == 4

    def test_mask_shape_mismatch_raises(self, stub_server, rng):
        stub_server.state["mask_shape"] = (5, 5)
        seg = RemoteSegmenter(RemoteConfig(base_url=_url(stub_server), backoff=0.0))
        with pytest.raises(SegmentationError, match="shape"):
            seg.segment_points(random_image(rng, 6, 6), [(1.0, 1.0)])

    def test_chunked_queries_preserve_order_and_count(self, stub_server, rng):
        stub_server.state["mask_shape"] = (6, 6)
        config = RemoteConfig(base_url=_url(stub_server), backoff=0.0, batch_size=4)
        seg = RemoteSegmenter(config)
        img = random_image(rng, 6, 6)
        points = [(float(i), float(i % 6)) for i in range(11)]
        out = seg.segment_points(img, points)
        assert len(out) == 11
        seg_calls = [c for c in stub_server.state["calls"] if c[1] == "/v1/segment"]
        assert len(seg_calls) == 3  # chunks of 4, 4, 3

    def test_embed_images_batch_helper(self, stub_server, rng):
        config = RemoteConfig(base_url=_url(stub_server), backoff=0.0, batch_size=3)
        scorer = RemoteScorer(config)
        imgs = [random_image(rng, 4, 4) for _ in range(5)]
        vecs = scorer.embed_images(imgs)
        assert len(vecs) == 5
        singles = [scorer.embed_image(im) for im in imgs]
        assert all(np.array_equal(a, b) for a, b in zip(vecs, singles))

    def test_segment_cache_transparency(self, stub_server, rng, tmp_path):
        cache = DiskCache(tmp_path)
        config = RemoteConfig(base_url=_url(stub_server), backoff=0.0, cache=cache)
        seg = RemoteSegmenter(config)
        img = random_image(rng, 6, 6)
        first = seg.segment_boxes(img, [Box(0, 0, 4, 4)])
        second = seg.segment_boxes(img, [Box(0, 0, 4, 4)])
        seg_calls = [c for c in stub_server.state["calls"] if c[1] == "/v1/segment"]
        assert len(seg_calls) == 1
        assert np.array_equal(first[0][0], second[0][0])
        assert first[0][1] == second[0][1]
