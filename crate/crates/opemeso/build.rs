fn main() {
    // System OpenBLAS bundles CBLAS and LAPACK; both the ndarray `blas`
    // feature and the raw LAPACK bindings resolve against it.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
