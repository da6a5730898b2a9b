#!/usr/bin/env python3
"""
Setup script for mtl-lab
"""
import importlib
import subprocess
import sys
from pathlib import Path

REQUIRED_MODULES = ['numpy', 'scipy', 'torch', 'pydantic', 'dotenv', 'click', 'yaml', 'joblib', 'tqdm']
ENV_VARS = ['MTL_LAB_SEED', 'MTL_LAB_THREADS', 'MTL_LAB_LOG_LEVEL', 'MTL_LAB_OUTPUT', 'MTL_LAB_NUM_IMAGES']


def print_step(step, message):
    """Print formatted step"""
    print(f"\n{'='*70}")
    print(f"STEP {step}: {message}")
    print('='*70)


def check_python_version():
    """Ensure Python version is 3.9+"""
    if sys.version_info < (3, 9):
        print("❌ Python 3.9+ required")
        sys.exit(1)
    print(f"✓ Python {sys.version_info.major}.{sys.version_info.minor}")


def install_dependencies():
    """Install Python dependencies"""
    print("Installing dependencies...")
    subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
    print("✓ Dependencies installed")


def check_imports():
    """Import every runtime dependency"""
    missing = []
    for name in REQUIRED_MODULES:
        try:
            importlib.import_module(name)
        except ImportError:
            missing.append(name)
    if missing:
        print(f"❌ Missing modules: {', '.join(missing)}")
        sys.exit(1)
    print(f"✓ {len(REQUIRED_MODULES)} modules importable")


def check_env_file():
    """Report MTL_LAB_* overrides found in .env (the file is optional)"""
    env_path = Path('.env')
    if not env_path.exists():
        print("ℹ️  No .env file; built-in defaults apply")
        return

    with open(env_path) as f:
        content = f.read()
    found = [var for var in ENV_VARS if var in content]
    print(f"✓ .env overrides: {', '.join(found) if found else 'none'}")


def smoke_test():
    """Validate the config and run a short gradient check"""
    try:
        from config import Config
        from gradcheck import run_gradient_suite

        Config.validate()
        print("✓ Configuration valid")
        worst = run_gradient_suite(instances=5)
        ok = all(err <= 1e-4 for err in worst.values())
        print(f"{'✓' if ok else '❌'} Gradient check: worst relative error {max(worst.values()):.2e}")
        return ok
    except Exception as e:
        print(f"❌ Smoke test failed: {e}")
        return False


def main():
    """Run setup"""
    print("""
╔═══════════════════════════════════════════════════════════════════╗
║                          mtl-lab Setup                            ║
║            Multi-Task Learning Numerics Over Files                ║
╚═══════════════════════════════════════════════════════════════════╝
    """)

    try:
        print_step(1, "CHECKING PYTHON VERSION")
        check_python_version()

        print_step(2, "INSTALLING DEPENDENCIES")
        install_dependencies()

        print_step(3, "CHECKING IMPORTS")
        check_imports()

        print_step(4, "CHECKING ENVIRONMENT")
        check_env_file()

        print_step(5, "SMOKE TEST")
        ok = smoke_test()

        print("\n" + "="*70)
        print("✅ SETUP COMPLETE!" if ok else "⚠️  SETUP FINISHED WITH ERRORS")
        print("="*70)
        print("\n🚀 Try:")
        print("\n   python main.py --help")
        print("   python examples.py")
        print("   pytest tests")

    except Exception as e:
        print(f"\n❌ Setup failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
