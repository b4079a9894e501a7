fn main() {
    env_logger::init();
    std::process::exit(govmpc::scenarios::cli_main(std::env::args_os()));
}
