fn main() {
    std::process::exit(lrru::cli::run(std::env::args_os()));
}
