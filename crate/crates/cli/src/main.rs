fn main() {
    std::process::exit(mipslice_cli::run(std::env::args_os()));
}
