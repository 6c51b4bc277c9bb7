#!/usr/bin/env python3
"""
Readiness Check Script
Verifies that the environment can run the fault-diagnosis experiments
"""

import os
import sys
import tempfile

from dotenv import load_dotenv


def check_environment():
    """Optional environment settings"""
    print("🔧 Checking Environment Variables...")
    load_dotenv()

    workers = os.getenv("MAVGRAM_WORKERS", "")
    if workers and not workers.isdigit():
        print(f"❌ MAVGRAM_WORKERS must be a non-negative integer, got {workers!r}")
        return False
    print(f"✅ MAVGRAM_WORKERS={workers or '0 (in-process loading)'}")
    if os.getenv("MAVGRAM_SLOW") == "1":
        print("⚠️ MAVGRAM_SLOW=1: the desk-scale acceptance experiments will run with pytest")
    return True


def check_imports():
    """Numerical stack and package modules"""
    print("\n📦 Checking Imports...")
    try:
        import librosa  # noqa: F401
        import scipy  # noqa: F401
        import sklearn  # noqa: F401
        import soundfile  # noqa: F401
        import torch

        from utils.pipeline import evaluate, finetune, pretrain  # noqa: F401
        print(f"✅ All imports successful (torch {torch.__version__})")
        return True
    except Exception as e:
        print(f"❌ Import error: {e}")
        return False


def check_configs():
    """Bundled presets load and validate"""
    print("\n📄 Checking Config Presets...")
    from utils.config import load_config

    ok = True
    for name in ("config.yaml", "config.micro.yaml"):
        try:
            cfg = load_config(name)
            print(f"✅ {name}: {cfg.epochs} epochs, {cfg.features.n_mels}x{cfg.features.frames} features")
        except Exception as e:
            print(f"❌ {name}: {e}")
            ok = False
    return ok


def check_geometry():
    """Canonical sample through the full model"""
    print("\n🎯 Checking Canonical Geometry...")
    try:
        import torch

        from utils.config import TrainConfig
        from utils.pipeline import build_model

        cfg = TrainConfig()
        model = build_model(cfg)
        model.eval()
        with torch.no_grad():
            emb = model.embed(
                torch.zeros(1, 1, cfg.features.n_mels, cfg.features.frames),
                torch.zeros(1, cfg.features.length),
                torch.zeros(1, cfg.features.length),
            )
        params = sum(p.numel() for p in model.mfn.parameters())
        print(f"✅ embedding {tuple(emb.shape)}, {params:,} MFN parameters")
        return tuple(emb.shape) == (1, cfg.model.embedding)
    except Exception as e:
        print(f"❌ Geometry error: {e}")
        return False


def check_run_directory():
    """Run directories and atomic writes work here"""
    print("\n📂 Checking Run Directory...")
    try:
        from utils.datasets import atomic_write_text

        with tempfile.TemporaryDirectory(dir=".") as tmp:
            atomic_write_text(os.path.join(tmp, "write_check.txt"), "ok\n")
        print("✅ Working directory is writable")
        return True
    except Exception as e:
        print(f"❌ Cannot write run files: {e}")
        return False


def main():
    """Run all checks"""
    print("🚀 Readiness Check")
    print("=" * 50)

    checks = [
        check_environment,
        check_imports,
        check_configs,
        check_geometry,
        check_run_directory,
    ]

    results = []
    for check in checks:
        results.append(check())

    print("\n" + "=" * 50)
    print("📊 Check Results:")

    if all(results):
        print("🎉 ALL CHECKS PASSED!")
        print("\n📋 Next Steps:")
        print("1. ./reproduce.sh for a desk-scale source -> target run")
        print("2. python app.py ablate --out runs/ablate --variants MAV,ST,MV,AV")
        print("3. MAVGRAM_SLOW=1 pytest test_acceptance.py")
        return 0
    print("❌ Some checks failed. Please fix the issues above.")
    return 1


if __name__ == "__main__":
    sys.exit(main())
