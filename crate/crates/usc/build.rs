use std::env;
use std::path::Path;

// The netlib backend links `-lcblas`, which some distros do not ship as a
// separate library. OpenBLAS exports the full cblas interface, so when no
// standalone libcblas is present we point the linker at it through a shim.
fn main() {
    let candidates = [
        "/usr/lib/x86_64-linux-gnu",
        "/usr/lib",
        "/usr/local/lib",
        "/usr/lib/aarch64-linux-gnu",
    ];
    let have_cblas = candidates
        .iter()
        .any(|d| Path::new(d).join("libcblas.so").exists() || Path::new(d).join("libcblas.a").exists());
    if have_cblas {
        return;
    }
    let openblas = candidates
        .iter()
        .map(|d| Path::new(d).join("libopenblas.so"))
        .find(|p| p.exists());
    if let Some(openblas) = openblas {
        let out_dir = env::var("OUT_DIR").unwrap();
        let shim = Path::new(&out_dir).join("libcblas.so");
        if !shim.exists() {
            std::os::unix::fs::symlink(&openblas, &shim).unwrap();
        }
        println!("cargo:rustc-link-search=native={out_dir}");
    }
}
