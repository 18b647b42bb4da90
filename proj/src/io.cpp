#include "abltx/io.hpp"

#include <cerrno>
#include <cstring>
#include <string>
#include <utility>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include "abltx/error.hpp"

namespace abltx {

namespace {

[[noreturn]] void fail(const std::string &what, const std::filesystem::path &path) {
    throw IoError(what + " '" + path.string() + "': " + std::strerror(errno));
}

} // namespace

File::File(const std::filesystem::path &path, Mode mode) : path_(path) {
    if (mode == Mode::Read) {
        fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    } else {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    }
    if (fd_ < 0) fail("cannot open", path);
}

File::~File() { close(); }

File::File(File &&other) noexcept
    : fd_(std::exchange(other.fd_, -1)), path_(std::move(other.path_)) {}

File &File::operator=(File &&other) noexcept {
    if (this != &other) {
        close();
        fd_ = std::exchange(other.fd_, -1);
        path_ = std::move(other.path_);
    }
    return *this;
}

void File::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

std::uint64_t File::size() const {
    struct stat st{};
    if (::fstat(fd_, &st) != 0) fail("cannot stat", path_);
    return static_cast<std::uint64_t>(st.st_size);
}

std::size_t File::read_at(std::uint64_t offset, std::span<std::byte> buf) const {
    std::size_t done = 0;
    while (done < buf.size()) {
        const ssize_t n = ::pread(fd_, buf.data() + done, buf.size() - done,
                                  static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            fail("read failed on", path_);
        }
        if (n == 0) break;
        done += static_cast<std::size_t>(n);
    }
    return done;
}

void File::read_exact(std::uint64_t offset, std::span<std::byte> buf) const {
    if (read_at(offset, buf) != buf.size())
        throw ContractError("unexpected end of file in '" + path_.string() + "'");
}

void File::write_at(std::uint64_t offset, std::span<const std::byte> buf) const {
    std::size_t done = 0;
    while (done < buf.size()) {
        const ssize_t n = ::pwrite(fd_, buf.data() + done, buf.size() - done,
                                   static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            fail("write failed on", path_);
        }
        done += static_cast<std::size_t>(n);
    }
}

void File::truncate(std::uint64_t size) const {
    if (::ftruncate(fd_, static_cast<off_t>(size)) != 0) fail("cannot resize", path_);
}

void File::sync() const {
    if (::fsync(fd_) != 0) fail("fsync failed on", path_);
}

AtomicOutput::AtomicOutput(std::filesystem::path final_path)
    : final_(std::move(final_path)), partial_(final_.string() + ".partial"),
      file_(partial_, File::Mode::CreateTruncate) {}

AtomicOutput::~AtomicOutput() {
    if (!committed_) {
        file_.close();
        std::error_code ec;
        std::filesystem::remove(partial_, ec);
    }
}

void AtomicOutput::commit() {
    file_.close();
    std::error_code ec;
    std::filesystem::rename(partial_, final_, ec);
    if (ec) throw IoError("cannot rename '" + partial_.string() + "' to '" + final_.string() + "': " + ec.message());
    committed_ = true;
}

} // namespace abltx
