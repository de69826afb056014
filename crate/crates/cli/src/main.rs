fn main() {
    eprintln!("error[Parse]: no command given");
    std::process::exit(2);
}
