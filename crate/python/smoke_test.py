"""Build the extension with cargo, import it, and check a few programs."""

import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
PROGRAMS = ROOT / "crates" / "core" / "programs"


def load():
    subprocess.run(
        ["cargo", "build", "--offline", "-p", "rtensor-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "debug" / "librtensor_py.so"
    dest = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, dest / "rtensor.so")
    sys.path.insert(0, str(dest))
    import rtensor

    return rtensor


def flat(outputs, name):
    return [x for p in outputs["values"][name] for x in p["data"]]


def main():
    rt = load()

    src = (PROGRAMS / "prefix_sum.rtl").read_text()
    prog = rt.compile(src)
    got = prog.run({"T": 6}, seed=1)
    want = rt.oracle(src, {"T": 6}, seed=1)
    assert got["bounds"]["T"] == 6
    assert flat(got, "s") == flat(want, "s"), (got, want)
    xs = [x for p in rt.oracle(src.replace("s + x[t+1]", "x[t+1]"), {"T": 6}, seed=1)["values"]["s"] for x in p["data"]]
    running = [sum(xs[: k + 1]) for k in range(len(xs))]
    assert all(abs(a - b) < 1e-12 for a, b in zip(flat(got, "s"), running))

    rl = rt.compile((PROGRAMS / "reinforce.rtl").read_text())
    assert rl.phases == 2
    assert rl.schedule().strip()

    large = (PROGRAMS / "large_obs.rtl").read_text()
    tight = rt.compile(large, incrementalize=False, swap_threshold=None, block_bytes=32768)
    try:
        tight.run(device_bytes=98304)
    except ValueError as e:
        assert "memory" in str(e).lower(), e
    else:
        raise AssertionError("expected the device to overflow")
    roomy = rt.compile(large, swap_threshold=4096, block_bytes=32768)
    stats = roomy.stats(device_bytes=98304)
    assert stats["memory"]["device_peak"] <= 98304 and stats["memory"]["host_peak"] > 0

    try:
        rt.compile("x = nope(;")
    except ValueError:
        pass
    else:
        raise AssertionError("expected a parse error")
    print("smoke test passed")


if __name__ == "__main__":
    main()
