fn main() {
    println!("groundcal");
}
