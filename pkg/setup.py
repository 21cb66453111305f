#!/usr/bin/env python3
"""
Setup script for Kernel CT Reconstruction
Automates installation and initial setup
"""

import json
import subprocess
import sys
from pathlib import Path


def run_command(command, description=""):
    """Run a shell command and handle errors"""
    print(f"🔄 {description}")
    try:
        result = subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        print(f"✅ {description} - Success")
        return result.stdout
    except subprocess.CalledProcessError as e:
        print(f"❌ {description} - Failed")
        print(f"Error: {e.stderr}")
        return None


def check_python_version():
    """Check if Python version is compatible"""
    print("🐍 Checking Python version...")
    version = sys.version_info
    if version.major < 3 or (version.major == 3 and version.minor < 9):
        print("❌ Python 3.9+ is required")
        sys.exit(1)
    print(f"✅ Python {version.major}.{version.minor}.{version.micro} is compatible")


def install_dependencies():
    """Install Python dependencies"""
    print("\n📦 Installing dependencies...")
    result = run_command(f"{sys.executable} -m pip install -r requirements.txt", "Installing Python packages")
    if result is None:
        print("❌ Failed to install dependencies")
        return False
    return True


def create_config_file():
    """Write config.json from the built-in defaults when it is missing"""
    print("\n⚙️  Creating configuration file...")
    config_path = Path('config.json')
    if config_path.exists():
        print(f"✅ Keeping existing {config_path}")
        return
    sys.path.append('app')
    from utils import ConfigManager

    defaults = ConfigManager(config_file=str(config_path)).config
    with open(config_path, 'w', encoding='utf-8') as f:
        json.dump(defaults, f, indent=2)
    print(f"✅ Configuration saved to {config_path}")


def create_directories():
    """Create the cache and results directories named in config.json"""
    print("\n📁 Creating directories...")
    paths = {"cache_dir": "cache", "results_dir": "results"}
    config_path = Path('config.json')
    if config_path.exists():
        with open(config_path, 'r', encoding='utf-8') as f:
            paths.update(json.load(f).get("paths", {}))
    for directory in paths.values():
        Path(directory).mkdir(parents=True, exist_ok=True)
        print(f"✅ Created {directory}")


def generate_sample_data():
    """Simulate the default Shepp-Logan sinogram into data/"""
    print("\n📊 Generating a sample sinogram...")
    result = run_command(
        f"{sys.executable} scripts/kr_cli.py sinogram --n 40 --m 100 --grid random --sigma 20 --seed 0 "
        f"--out data/shepp_logan_sigma20.csv",
        "Simulating 40x100 sinogram",
    )
    return result is not None


def run_tests():
    """Run the quick verification checks to confirm the installation"""
    print("\n🧪 Running basic tests...")
    try:
        sys.path.append('app')
        from verification import VerificationSuite

        suite = VerificationSuite(seed=0)
        suite.check_tikhonov()
        suite.check_circulant()
        if suite.failed:
            print("❌ Basic functionality test failed")
            return False
        print("✅ Basic functionality test passed")
        return True
    except Exception as e:
        print(f"❌ Import test failed: {e}")
        return False


def show_next_steps():
    """Show next steps after installation"""
    print("\n🎉 Installation completed successfully!")
    print("\n📋 Next Steps:")
    print("1. Reconstruct the sample sinogram:")
    print("   python scripts/kr_cli.py reconstruct kr --sino data/shepp_logan_sigma20.csv --out results/kr.pgm")
    print("\n2. Compare with filtered backprojection:")
    print("   python scripts/kr_cli.py reconstruct fbp --sino data/shepp_logan_sigma20.csv --out results/fbp.pgm")
    print("\n3. Run the oracle suite:")
    print("   python scripts/kr_cli.py verify")
    print("\n4. Run the tests:")
    print("   python -m pytest -m 'not slow' -v")
    print("\n📚 Documentation: README.md")


def main():
    """Main setup function"""
    print("🧮 Kernel CT Reconstruction - Setup Script")
    print("=" * 50)

    check_python_version()

    if not install_dependencies():
        print("❌ Setup failed during dependency installation")
        sys.exit(1)

    create_config_file()
    create_directories()
    generate_sample_data()

    if run_tests():
        show_next_steps()
    else:
        print("\n⚠️  Setup completed with warnings")
        print("Some checks failed, but the package may still work")
        print("Check the error messages above and kernel_ct.log")


if __name__ == "__main__":
    main()
