fn main() {
    std::process::exit(uavdist_cli::run(std::env::args_os()));
}
