import json
from pathlib import Path

import numpy as np
import pytest
import torch

from rta.synthetic import clustered_corpus

torch.set_num_threads(1)


def mpd_track(uri, artist, album, duration_ms=200_000):
    return {"track_uri": uri, "artist_uri": artist, "album_uri": album, "duration_ms": duration_ms,
            "track_name": uri, "artist_name": artist, "album_name": album}


def write_slice(path: Path, playlists):
    """playlists: list of (pid, [track dicts])."""
    doc = {"info": {"slice": path.name}, "playlists": [
        {"pid": pid, "name": f"p{pid}", "num_tracks": len(tr),
         "tracks": [dict(t, pos=i) for i, t in enumerate(tr)]} for pid, tr in playlists]}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def mpd_dir(tmp_path):
    """Two slices, 10 playlists over 12 tracks, some tracks shared across slices."""
    rng = np.random.default_rng(3)
    tracks = [mpd_track(f"spotify:track:{i:02d}", f"spotify:artist:{i % 4}", f"spotify:album:{i % 6}",
                        30_000 * (i + 1)) for i in range(12)]
    pls = [(pid, [tracks[j] for j in rng.choice(12, size=rng.integers(2, 8), replace=False)]) for pid in range(10)]
    write_slice(tmp_path / "mpd.slice.0-4.json", pls[:5])
    write_slice(tmp_path / "mpd.slice.5-9.json", pls[5:])
    return tmp_path


@pytest.fixture(scope="session")
def small_corpus():
    corpus, clusters = clustered_corpus(n_playlists=300, n_songs=120, n_clusters=6, min_len=8, max_len=20, seed=11)
    return corpus, clusters


# -- acceptance reporting ----------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line; ``ok`` may be True, False or "SKIP"."""

    def record(n: int, ok, detail: str) -> None:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        _CRITERIA[n] = (status, detail)
        print(f"criterion {n}: {status} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:4s}  {detail}")
