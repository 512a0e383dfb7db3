import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback is used at runtime
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rodservo._kernels._som_core",
                ["src/rodservo/_kernels/_som_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
