// Echo-stub bridge: answers the line protocol on stdin/stdout, or on a TCP
// port with --port. Used by the test suite in place of a pretrained model.

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "memlab/bridge_client.hpp"

using namespace memlab;

namespace {

int serve_tcp(EchoStub& stub, int port) {
  const int srv = ::socket(AF_INET, SOCK_STREAM, 0);
  if (srv < 0) return 1;
  int one = 1;
  ::setsockopt(srv, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(srv, 1) != 0) {
    std::cerr << "echo_bridge: cannot listen on port " << port << "\n";
    return 1;
  }
  for (;;) {
    const int fd = ::accept(srv, nullptr, nullptr);
    if (fd < 0) continue;
    detail::FdLineReader reader(fd);
    try {
      for (;;) detail::write_all(fd, stub.handle(reader.read_line()) + "\n");
    } catch (const BridgeError&) {
    }
    ::close(fd);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"echo-stub model bridge"};
  int vocab = 512, port = 0;
  std::size_t max_context = 2048;
  app.add_option("--vocab", vocab, "vocabulary size");
  app.add_option("--max-context", max_context, "reported max context");
  app.add_option("--port", port, "serve TCP on 127.0.0.1:<port> instead of stdio");
  CLI11_PARSE(app, argc, argv);
  if (vocab < 2) {
    std::cerr << "echo_bridge: vocab must be >= 2\n";
    return 1;
  }
  EchoStub stub(vocab, max_context);
  if (port > 0) return serve_tcp(stub, port);
  std::string line;
  while (std::getline(std::cin, line)) std::cout << stub.handle(line) << "\n" << std::flush;
  return 0;
}
