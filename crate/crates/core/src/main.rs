fn main() {
    std::process::exit(tpmil::cli::dispatch(std::env::args_os()));
}
