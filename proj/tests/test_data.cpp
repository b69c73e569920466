#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <zlib.h>

#include "wmnet/data.hpp"

using namespace wmnet;

namespace {

const std::filesystem::path kMnistDir = WMNET_MNIST_DIR;

bool have_mnist() {
    try {
        locate_idx(kMnistDir, MnistFiles::kTestImages);
        return true;
    } catch (const std::exception&) {
        return false;
    }
}

std::vector<std::uint8_t> small_image_file() {
    std::vector<std::uint8_t> bytes = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 2};
    for (int i = 0; i < 12; ++i) bytes.push_back(static_cast<std::uint8_t>(i * 20));
    return bytes;
}

Tensor<float> ramp_image() {
    Tensor<float> img({1, 28, 28});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 251 + 1) / 255.0f;
    return img;
}

}  // namespace

TEST(ParseIdx, SmallImageArray) {
    const auto a = parse_idx(small_image_file());
    EXPECT_EQ(a.magic, kIdxImagesMagic);
    EXPECT_EQ(a.dims, (std::vector<std::uint32_t>{2, 3, 2}));
    const auto images = idx_to_images(a);
    EXPECT_EQ(images.shape(), (Shape{2, 1, 3, 2}));
    EXPECT_FLOAT_EQ(images[11], 220.0f / 255.0f);
}

TEST(ParseIdx, RoundTripIsByteIdentical) {
    const auto bytes = small_image_file();
    EXPECT_EQ(serialize_idx(parse_idx(bytes)), bytes);
    EXPECT_EQ(serialize_idx(images_to_idx(idx_to_images(parse_idx(bytes)))), bytes);
    const std::vector<int> labels = {3, 1, 4, 1, 5, 9, 2, 6};
    EXPECT_EQ(idx_to_labels(parse_idx(serialize_idx(labels_to_idx(labels)))), labels);
}

TEST(ParseIdx, MalformedStreamsRejectedWithOffset) {
    auto expect_offset = [](std::vector<std::uint8_t> bytes, std::size_t offset) {
        try {
            parse_idx(bytes);
            FAIL() << "accepted malformed stream";
        } catch (const IdxError& e) {
            EXPECT_EQ(e.offset(), offset) << e.what();
            EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
        }
    };
    const auto good = small_image_file();
    expect_offset({0, 0, 8}, 0);                                     // truncated magic
    expect_offset(std::vector<std::uint8_t>(good.begin(), good.begin() + 8), 8);  // 4-byte truncated header
    auto bad_magic = good;
    bad_magic[2] = 9;
    expect_offset(bad_magic, 0);
    expect_offset(std::vector<std::uint8_t>(good.begin(), good.end() - 1), 16);
    auto trailing = good;
    trailing.push_back(0);
    expect_offset(trailing, 28);
    auto zero_dim = good;
    zero_dim[7] = 0;
    expect_offset(zero_dim, 4);
    std::vector<std::uint8_t> huge = {0, 0, 8, 3, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff};
    expect_offset(huge, 8);
}

TEST(ParseIdx, LabelOutOfRangeRejected) {
    EXPECT_THROW(idx_to_labels(parse_idx(std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 1, 10})), IdxError);
}

TEST(ReadFileBytes, InflatesGzipTransparently) {
    const auto dir = std::filesystem::temp_directory_path() / "wmnet_test_gz";
    std::filesystem::create_directories(dir);
    const auto bytes = small_image_file();
    gzFile f = gzopen((dir / "t10k-images-idx3-ubyte.gz").string().c_str(), "wb");
    ASSERT_NE(f, nullptr);
    gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    const auto path = locate_idx(dir, MnistFiles::kTestImages);
    EXPECT_EQ(path.extension(), ".gz");
    EXPECT_EQ(read_file_bytes(path), bytes);
    EXPECT_THROW(locate_idx(dir, MnistFiles::kTrainLabels), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST(Mnist, OfficialTestSetShapeAndLabels) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not found in " << kMnistDir;
    const auto test = load_mnist(kMnistDir, Split::test);
    EXPECT_EQ(test.images.shape(), (Shape{10000, 1, 28, 28}));
    std::array<std::size_t, 10> hist{};
    for (int l : test.labels) ++hist.at(static_cast<std::size_t>(l));
    std::size_t total = 0;
    for (std::size_t c : hist) {
        EXPECT_GT(c, 0u);
        total += c;
    }
    EXPECT_EQ(total, 10000u);
    for (float v : test.images.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Mnist, OfficialFilesRoundTripByteIdentical) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not found in " << kMnistDir;
    for (const char* name : {MnistFiles::kTestImages, MnistFiles::kTestLabels}) {
        const auto bytes = read_file_bytes(locate_idx(kMnistDir, name));
        EXPECT_EQ(serialize_idx(parse_idx(bytes)), bytes) << name;
    }
    const auto bytes = read_file_bytes(locate_idx(kMnistDir, MnistFiles::kTestImages));
    EXPECT_EQ(serialize_idx(images_to_idx(idx_to_images(parse_idx(bytes)))), bytes);
}

TEST(Split, SizesDisjointCoverAndDeterminism) {
    Dataset source;
    source.images = Tensor<float>({kMnistTrainSize, 1, 1, 1});
    source.labels.assign(kMnistTrainSize, 0);
    for (std::size_t i = 0; i < kMnistTrainSize; ++i) source.images[i] = static_cast<float>(i);
    const auto a = split_train_val(source, 1), b = split_train_val(source, 1), c = split_train_val(source, 2);
    EXPECT_EQ(a.train.size(), 54000u);
    EXPECT_EQ(a.val.size(), 6000u);
    EXPECT_EQ(a.train_indices, b.train_indices);
    EXPECT_EQ(a.val_indices, b.val_indices);
    EXPECT_NE(std::vector<std::size_t>(a.train_indices.begin(), a.train_indices.begin() + 100),
              std::vector<std::size_t>(c.train_indices.begin(), c.train_indices.begin() + 100));
    std::set<std::size_t> all(a.train_indices.begin(), a.train_indices.end());
    all.insert(a.val_indices.begin(), a.val_indices.end());
    EXPECT_EQ(all.size(), kMnistTrainSize);
    EXPECT_EQ(*all.rbegin(), kMnistTrainSize - 1);
    // the selected images follow the indices
    EXPECT_EQ(a.val.images[17], static_cast<float>(a.val_indices[17]));
    EXPECT_EQ(a.val.split, Split::val);
}

TEST(Split, WrongSourceSizeRejected) {
    Dataset source;
    source.images = Tensor<float>({10, 1, 1, 1});
    source.labels.assign(10, 0);
    EXPECT_THROW(split_train_val(source, 1), std::invalid_argument);
}

TEST(PadCrop, CentreOffsetIsIdentity) {
    const auto img = ramp_image();
    Tensor<float> out(img.shape());
    pad_crop<float>(img.data(), 28, 28, 2, 2, 2, out.data());
    EXPECT_EQ(out, img);
}

TEST(PadCrop, OriginOffsetShiftsDownRightWithZeroFill) {
    const auto img = ramp_image();
    Tensor<float> out(img.shape());
    pad_crop<float>(img.data(), 28, 28, 2, 0, 0, out.data());
    for (std::size_t i = 0; i < 28; ++i)
        for (std::size_t j = 0; j < 28; ++j) {
            const float expected = (i < 2 || j < 2) ? 0.0f : img.at(0, i - 2, j - 2);
            EXPECT_EQ(out.at(0, i, j), expected);
        }
}

TEST(PadCrop, RandomCropsStayInsideSourceValueSet) {
    const auto img = ramp_image();
    std::set<float> allowed(img.data().begin(), img.data().end());
    allowed.insert(0.0f);
    std::mt19937_64 rng(5), replay(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto out = augment_pad_crop(img, 2, rng);
        EXPECT_EQ(out.shape(), (Shape{1, 28, 28}));
        for (float v : out.data()) ASSERT_TRUE(allowed.count(v));
        EXPECT_EQ(augment_pad_crop(img, 2, replay), out);
    }
}

TEST(PadCrop, ZeroPadIsIdentity) {
    const auto img = ramp_image();
    std::mt19937_64 rng(1);
    EXPECT_EQ(augment_pad_crop(img, 0, rng), img);
}
