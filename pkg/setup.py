import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "terralign.kernels._conv",
        ["src/terralign/kernels/_conv.pyx"],
        include_dirs=[np.get_include()],
        # reassociation flags let gcc vectorize the dot-product reductions;
        # NaN/Inf semantics are preserved (no -ffinite-math-only)
        extra_compile_args=[
            "-O3",
            "-march=native",
            "-fassociative-math",
            "-fno-signed-zeros",
            "-fno-trapping-math",
            "-fno-math-errno",
        ],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
