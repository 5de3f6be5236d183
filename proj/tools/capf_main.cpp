#include <iostream>

int main() {
  std::cout << "capf: CLI not wired up yet\n";
  return 0;
}
