#include "railnet/report.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <string_view>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <json.hpp>

namespace railnet {

using json = nlohmann::json;

uint16_t crc16_ccitt_false(const uint8_t* data, size_t len) {
  uint16_t crc = 0xFFFF;
  for (size_t i = 0; i < len; ++i) {
    crc = uint16_t(crc ^ (uint16_t(data[i]) << 8));
    for (int b = 0; b < 8; ++b)
      crc = (crc & 0x8000) ? uint16_t((crc << 1) ^ 0x1021) : uint16_t(crc << 1);
  }
  return crc;
}

namespace {

void put_u16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back(uint8_t(x >> 8));
  v.push_back(uint8_t(x & 0xff));
}

void put_u64(std::vector<uint8_t>& v, uint64_t x) {
  for (int s = 56; s >= 0; s -= 8) v.push_back(uint8_t((x >> s) & 0xff));
}

uint16_t get_u16(const uint8_t* p) {
  return uint16_t((uint16_t(p[0]) << 8) | p[1]);
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x = (x << 8) | p[i];
  return x;
}

std::vector<uint8_t> build_frame(uint8_t type, const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> f;
  f.reserve(8 + payload.size());
  f.push_back(kFrameMagic0);
  f.push_back(kFrameMagic1);
  f.push_back(kFrameVersion);
  f.push_back(type);
  put_u16(f, uint16_t(payload.size()));
  f.insert(f.end(), payload.begin(), payload.end());
  const uint16_t crc = crc16_ccitt_false(f.data() + 2, f.size() - 2);
  put_u16(f, crc);
  return f;
}

}  // namespace

std::vector<uint8_t> encode_frame(const FaultReport& r) {
  if (r.confidence_bp > 10000)
    throw FrameDecodeError(FrameError::BadField,
                           "report: confidence_bp " +
                               std::to_string(r.confidence_bp) + " > 10000");
  std::vector<uint8_t> payload;
  payload.reserve(21);
  put_u16(payload, r.device_id);
  put_u64(payload, r.timestamp_ms);
  put_u64(payload, r.track_position_mm);
  payload.push_back(r.class_id);
  put_u16(payload, r.confidence_bp);
  return build_frame(kFrameTypeReport, payload);
}

std::vector<uint8_t> encode_ack(uint16_t acked_crc) {
  std::vector<uint8_t> payload;
  put_u16(payload, acked_crc);
  return build_frame(kFrameTypeAck, payload);
}

FrameView parse_frame(const uint8_t* data, size_t len) {
  if (len < 2)
    throw FrameDecodeError(FrameError::BadLength, "frame shorter than its magic");
  if (data[0] != kFrameMagic0 || data[1] != kFrameMagic1)
    throw FrameDecodeError(FrameError::BadMagic, "bad frame magic");
  if (len < 6)
    throw FrameDecodeError(FrameError::BadLength, "frame header truncated");
  if (data[2] != kFrameVersion)
    throw FrameDecodeError(FrameError::BadVersion,
                           "unsupported frame version " + std::to_string(data[2]));
  const uint16_t plen = get_u16(data + 4);
  if (len != size_t(6) + plen + 2)
    throw FrameDecodeError(FrameError::BadLength,
                           "frame length mismatch: header says " +
                               std::to_string(plen) + " payload bytes, buffer has " +
                               std::to_string(len) + " total");
  const uint16_t stored = get_u16(data + 6 + plen);
  const uint16_t actual = crc16_ccitt_false(data + 2, size_t(4) + plen);
  if (stored != actual)
    throw FrameDecodeError(FrameError::BadCrc, "frame CRC mismatch");

  FrameView v;
  v.version = data[2];
  v.type = data[3];
  v.payload.assign(data + 6, data + 6 + plen);
  v.crc = stored;
  return v;
}

FaultReport decode_frame(const std::vector<uint8_t>& bytes) {
  const FrameView v = parse_frame(bytes.data(), bytes.size());
  if (v.type != kFrameTypeReport)
    throw FrameDecodeError(FrameError::BadType,
                           "expected a report frame, got type " +
                               std::to_string(v.type));
  if (v.payload.size() != 21)
    throw FrameDecodeError(FrameError::BadLength,
                           "report payload must be 21 bytes, got " +
                               std::to_string(v.payload.size()));
  FaultReport r;
  const uint8_t* p = v.payload.data();
  r.device_id = get_u16(p);
  r.timestamp_ms = get_u64(p + 2);
  r.track_position_mm = get_u64(p + 10);
  r.class_id = p[18];
  r.confidence_bp = get_u16(p + 19);
  if (r.confidence_bp > 10000)
    throw FrameDecodeError(FrameError::BadField,
                           "report: confidence_bp out of range");
  return r;
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

namespace {

// recv() exactly n bytes. Returns false on orderly shutdown before any byte;
// throws on error/timeout mid-frame.
bool recv_exact(int fd, uint8_t* buf, size_t n) {
  size_t got = 0;
  while (got < n) {
    const ssize_t r = recv(fd, buf + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw DataError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK)
        throw DataError("recv timed out");
      throw DataError(std::string("recv failed: ") + std::strerror(errno));
    }
    got += size_t(r);
  }
  return true;
}

void send_all(int fd, const uint8_t* buf, size_t n) {
  size_t sent = 0;
  while (sent < n) {
    const ssize_t r = send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw DataError(std::string("send failed: ") + std::strerror(errno));
    }
    sent += size_t(r);
  }
}

uint64_t now_epoch_ms() {
  return uint64_t(std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count());
}

void set_recv_timeout(int fd, int ms) {
  timeval tv{};
  tv.tv_sec = ms / 1000;
  tv.tv_usec = (ms % 1000) * 1000;
  setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
}

}  // namespace

ReportServer::ReportServer(std::string host, uint16_t port, std::string log_path)
    : host_(std::move(host)), port_(port), log_path_(std::move(log_path)) {}

ReportServer::~ReportServer() { stop(); }

void ReportServer::start() {
  if (running_.load()) return;

  listen_fd_ = socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0)
    throw DataError(std::string("socket failed: ") + std::strerror(errno));
  const int one = 1;
  setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port_);
  if (inet_pton(AF_INET, host_.c_str(), &addr.sin_addr) != 1) {
    close(listen_fd_);
    listen_fd_ = -1;
    throw DataError("bad listen address: " + host_);
  }
  if (bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 ||
      listen(listen_fd_, 64) < 0) {
    const std::string err = std::strerror(errno);
    close(listen_fd_);
    listen_fd_ = -1;
    throw DataError("cannot listen on " + host_ + ":" + std::to_string(port_) +
                    ": " + err);
  }
  sockaddr_in bound{};
  socklen_t blen = sizeof(bound);
  getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &blen);
  port_ = ntohs(bound.sin_port);

  // Truncate-create the log so line counts start at zero for this run only
  // when the file does not exist; otherwise append.
  std::ofstream touch(log_path_, std::ios::app);
  if (!touch) {
    close(listen_fd_);
    listen_fd_ = -1;
    throw DataError("cannot open report log: " + log_path_);
  }

  running_.store(true);
  accept_thread_ = std::thread(&ReportServer::accept_loop, this);
}

void ReportServer::stop() {
  if (!running_.exchange(false)) {
    if (accept_thread_.joinable()) accept_thread_.join();
    return;
  }
  if (listen_fd_ >= 0) {
    shutdown(listen_fd_, SHUT_RDWR);
    close(listen_fd_);
    listen_fd_ = -1;
  }
  if (accept_thread_.joinable()) accept_thread_.join();

  std::vector<std::thread> workers;
  {
    std::lock_guard<std::mutex> lock(clients_mu_);
    for (int fd : client_fds_) shutdown(fd, SHUT_RDWR);
    workers.swap(client_threads_);
  }
  for (std::thread& t : workers)
    if (t.joinable()) t.join();
  {
    std::lock_guard<std::mutex> lock(clients_mu_);
    for (int fd : client_fds_) close(fd);
    client_fds_.clear();
  }
}

void ReportServer::accept_loop() {
  while (running_.load()) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int pr = poll(&pfd, 1, 200);
    if (!running_.load()) break;
    if (pr <= 0) continue;
    const int fd = accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      break;  // listening socket is gone
    }
    set_recv_timeout(fd, 30000);
    std::lock_guard<std::mutex> lock(clients_mu_);
    client_fds_.push_back(fd);
    client_threads_.emplace_back(&ReportServer::serve_client, this, fd);
  }
}

void ReportServer::append_log_line(const std::string& line) {
  std::lock_guard<std::mutex> lock(log_mu_);
  std::ofstream f(log_path_, std::ios::app);
  if (!f) {
    log_failed_.store(true);
    return;
  }
  f << line << '\n';
  f.flush();
  if (!f) log_failed_.store(true);
}

void ReportServer::serve_client(int fd) {
  std::vector<uint8_t> frame;
  while (running_.load()) {
    uint8_t header[6];
    try {
      if (!recv_exact(fd, header, 6)) break;  // clean EOF
      const uint16_t plen = get_u16(header + 4);
      frame.assign(header, header + 6);
      frame.resize(size_t(6) + plen + 2);
      if (!recv_exact(fd, frame.data() + 6, size_t(plen) + 2)) break;
    } catch (const DataError&) {
      break;  // timeout or transport error: drop the connection
    }

    FaultReport report;
    uint16_t crc;
    try {
      crc = parse_frame(frame.data(), frame.size()).crc;
      report = decode_frame(frame);
    } catch (const FrameDecodeError&) {
      continue;  // no ack, connection stays open
    }

    json line{{"device_id", report.device_id},
              {"timestamp_ms", report.timestamp_ms},
              {"track_position_mm", report.track_position_mm},
              {"class_id", report.class_id},
              {"confidence_bp", report.confidence_bp},
              {"received_at_ms", now_epoch_ms()}};
    append_log_line(line.dump());

    try {
      const std::vector<uint8_t> ack = encode_ack(crc);
      send_all(fd, ack.data(), ack.size());
    } catch (const DataError&) {
      break;
    }
  }
  // fd is closed in stop(); closing here would race the shutdown path.
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

void send_report(const std::string& host, uint16_t port, const FaultReport& r,
                 int timeout_ms) {
  const std::vector<uint8_t> frame = encode_frame(r);
  const uint16_t frame_crc = get_u16(frame.data() + frame.size() - 2);

  const int fd = socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0)
    throw DataError(std::string("socket failed: ") + std::strerror(errno));
  struct FdCloser {
    int fd;
    ~FdCloser() { close(fd); }
  } closer{fd};

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw DataError("bad server address: " + host);

  set_recv_timeout(fd, timeout_ms);
  if (connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0)
    throw DataError("cannot connect to " + host + ":" + std::to_string(port) +
                    ": " + std::strerror(errno));

  send_all(fd, frame.data(), frame.size());

  std::vector<uint8_t> ack(kAckFrameSize);
  try {
    if (!recv_exact(fd, ack.data(), ack.size()))
      throw DataError("server closed the connection without an ack");
  } catch (const DataError& e) {
    if (std::string_view(e.what()).find("timed out") != std::string_view::npos)
      throw DataError("timed out waiting for ack");
    throw;
  }

  FrameView v;
  try {
    v = parse_frame(ack.data(), ack.size());
  } catch (const FrameDecodeError& e) {
    throw DataError(std::string("malformed ack: ") + e.what());
  }
  if (v.type != kFrameTypeAck || v.payload.size() != 2 ||
      get_u16(v.payload.data()) != frame_crc)
    throw DataError("ack does not match the sent frame");
}

// ---------------------------------------------------------------------------
// Log reading
// ---------------------------------------------------------------------------

ReportList list_reports(const std::string& log_path, const ReportFilter& filter) {
  std::ifstream f(log_path);
  if (!f) throw DataError("cannot open report log: " + log_path);

  ReportList out;
  std::string line;
  long line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      out.malformed.emplace_back(line_no, e.what());
      continue;
    }
    LogEntry e;
    try {
      e.report.device_id = j.at("device_id").get<uint16_t>();
      e.report.timestamp_ms = j.at("timestamp_ms").get<uint64_t>();
      e.report.track_position_mm = j.at("track_position_mm").get<uint64_t>();
      e.report.class_id = j.at("class_id").get<uint8_t>();
      e.report.confidence_bp = j.at("confidence_bp").get<uint16_t>();
      e.received_at_ms = j.at("received_at_ms").get<uint64_t>();
    } catch (const json::exception& ex) {
      out.malformed.emplace_back(line_no, ex.what());
      continue;
    }
    if (filter.class_id && int(e.report.class_id) != *filter.class_id) continue;
    if (filter.from_ms && e.report.timestamp_ms < *filter.from_ms) continue;
    if (filter.to_ms && e.report.timestamp_ms > *filter.to_ms) continue;
    out.entries.push_back(e);
  }

  std::stable_sort(out.entries.begin(), out.entries.end(),
                   [](const LogEntry& a, const LogEntry& b) {
                     return a.report.timestamp_ms < b.report.timestamp_ms;
                   });
  return out;
}

}  // namespace railnet
