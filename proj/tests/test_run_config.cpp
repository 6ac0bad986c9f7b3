#include <gtest/gtest.h>

#include <sstream>

#include "seegraph/run_config.hpp"

using namespace seegraph;

TEST(RunConfig, DumpReadsBackToTheSameConfig) {
    RunConfig a;
    a.model.learning_rate = 3.3e-3;
    a.model.band = "alpha";
    a.model.use_pe = false;
    a.cohort.coupling = 0.7;
    a.cohort.match_power = true;
    a.top_k = 9;
    RunConfig b;
    std::istringstream is(dump_config(a));
    apply_config_text(b, is);
    EXPECT_EQ(dump_config(b), dump_config(a));
    EXPECT_EQ(b.model.learning_rate, 3.3e-3);
    EXPECT_EQ(b.model.band, "alpha");
    EXPECT_FALSE(b.model.use_pe);
    EXPECT_TRUE(b.cohort.match_power);
    EXPECT_EQ(b.top_k, 9u);
}

TEST(RunConfig, EveryKeyAppearsOnceInTheDump) {
    const auto text = dump_config(RunConfig{});
    for (const auto& key : config_keys()) EXPECT_NE(text.find(key + " = "), std::string::npos) << key;
}

TEST(RunConfig, LastAssignmentWins) {
    RunConfig c;
    std::istringstream is("epochs = 5  # comment\n\n  epochs=7\n");
    apply_config_text(c, is);
    EXPECT_EQ(c.model.epochs, 7u);
    apply_assignment(c, "epochs=9");
    EXPECT_EQ(c.model.epochs, 9u);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
    RunConfig c;
    EXPECT_THROW(apply_assignment(c, "learnign_rate=0.1"), ConfigError);
    EXPECT_THROW(apply_assignment(c, "epochs"), ConfigError);
    EXPECT_THROW(apply_assignment(c, "epochs=-3"), ConfigError);
    EXPECT_THROW(apply_assignment(c, "learning_rate=fast"), ConfigError);
    EXPECT_THROW(apply_assignment(c, "use_pe=maybe"), ConfigError);
    std::istringstream is("epochs = 3\nbogus = 1\n");
    try {
        apply_config_text(c, is, "run.cfg");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos);
    }
    EXPECT_THROW(get_config_value(c, "bogus"), ConfigError);
}

TEST(RunConfig, MissingFileIsUsageError) {
    RunConfig c;
    EXPECT_THROW(apply_config_file(c, "/nonexistent/seegraph.cfg"), UsageError);
}
