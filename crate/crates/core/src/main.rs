fn main() {
    std::process::exit(dymesh::cli::dispatch(std::env::args_os()));
}
