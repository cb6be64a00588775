"""Build script for the optional compiled graph-replay core.

The package is fully functional without the extension (a pure-Python
twin of the kernels is selected at import time), so a failed compile
only costs speed, never correctness.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: compiled engine core skipped ({exc}); "
                  "falling back to the pure-Python kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  "falling back to the pure-Python kernels")


try:
    from Cython.Build import cythonize
    extensions = cythonize(
        [Extension(
            "dualcast.engine._kernels_c",
            sources=["src/dualcast/engine/_kernels_c.pyx"],
            extra_compile_args=["-O3"],
        )],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions, cmdclass={"build_ext": OptionalBuildExt})
