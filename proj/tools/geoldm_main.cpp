#include <iostream>

int main() {
    std::cout << "geoldm placeholder\n";
    return 0;
}
