fn main() {
    std::process::exit(softmix::cli::run(std::env::args_os()));
}
