"""Fisher Feedback Navigation - episode driver, campaigns and validation"""
