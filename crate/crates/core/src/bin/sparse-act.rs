fn main() {
    std::process::exit(sparse_act::cli::run(std::env::args_os()));
}
