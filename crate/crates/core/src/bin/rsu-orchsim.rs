fn main() {
    std::process::exit(rsu_orchsim::cli::main_with_args(std::env::args_os()));
}
